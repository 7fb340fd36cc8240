//! Scratch probe: clean-forward BNS of emitted calibration images vs the
//! same measurement on fresh noise images.

use std::path::Path;

use rand::Rng;
use zsqd::data::load_dataset;
use zsqd::detector::BnMode;
use zsqd::rng::stream_rng;
use zsqd::synthesis::bns_alignment_loss;
use zsqd::tape::Tape;
use zsqd::tensor::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (teacher, _) = zsqd::ckpt::load_checkpoint(Path::new(&args[1])).unwrap();
    let mut teacher = teacher;
    teacher.set_frozen(true);

    for dir in &args[2..] {
        let ds = load_dataset(Path::new(dir)).unwrap();
        let idx: Vec<usize> = (0..ds.manifest.num_images).collect();
        let batch = ds.batch(&idx);
        let mut tape = Tape::new();
        let x = tape.leaf(&batch);
        let fwd = teacher.forward(&mut tape, x, BnMode::Measure).unwrap();
        let bns = bns_alignment_loss(&teacher, &mut tape, &fwd).unwrap();
        println!("{dir}: clean BNS {:.4} over {} images", tape.value_scalar(bns), idx.len());
    }

    // iteration-0 reference: sigmoid of standard normal latents
    let mut rng = stream_rng(123, 900);
    let n = 8;
    let s = teacher.cfg.image_size;
    let data: Vec<f64> =
        (0..n * 3 * s * s).map(|_| 1.0 / (1.0 + (-rng.gen_range(-3.0f64..3.0)).exp())).collect();
    let noise: Vec<f64> = {
        let mut v = Vec::with_capacity(n * 3 * s * s);
        for _ in 0..n * 3 * s * s {
            v.push(zsqd::tensor::randn_scalar(&mut rng));
        }
        v.into_iter().map(|z: f64| 1.0 / (1.0 + (-z).exp())).collect()
    };
    let _ = data;
    let batch = Tensor::new(vec![n, 3, s, s], noise).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(&batch);
    let fwd = teacher.forward(&mut tape, x, BnMode::Measure).unwrap();
    let bns = bns_alignment_loss(&teacher, &mut tape, &fwd).unwrap();
    println!("sigmoid(randn) noise: clean BNS {:.4} over {n} images", tape.value_scalar(bns));
}
