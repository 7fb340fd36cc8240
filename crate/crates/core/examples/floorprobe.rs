//! BNS of real training batches = the sampling-noise floor of Eq. 3.
use std::path::Path;
use zsqd::data::load_dataset;
use zsqd::detector::BnMode;
use zsqd::synthesis::bns_alignment_loss;
use zsqd::tape::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (mut teacher, _) = zsqd::ckpt::load_checkpoint(Path::new(&args[1])).unwrap();
    teacher.set_frozen(true);
    let ds = load_dataset(Path::new(&args[2])).unwrap();
    for bs in [8usize, 32, 256] {
        let mut vals = Vec::new();
        for start in [0usize, 1000, 2000] {
            let idx: Vec<usize> = (start..start + bs).collect();
            let batch = ds.batch(&idx);
            let mut tape = Tape::new();
            let x = tape.leaf(&batch);
            let fwd = teacher.forward(&mut tape, x, BnMode::Measure).unwrap();
            let bns = bns_alignment_loss(&teacher, &mut tape, &fwd).unwrap();
            vals.push(tape.value_scalar(bns));
        }
        println!("real batches of {bs}: BNS {:?}", vals.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
