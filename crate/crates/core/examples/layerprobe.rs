//! Per-BN-layer alignment breakdown for a synthesized image directory.
use std::path::Path;
use zsqd::data::load_dataset;
use zsqd::detector::BnMode;
use zsqd::tape::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (mut teacher, _) = zsqd::ckpt::load_checkpoint(Path::new(&args[1])).unwrap();
    teacher.set_frozen(true);
    let ds = load_dataset(Path::new(&args[2])).unwrap();
    let n = ds.images.len().min(32);
    let idx: Vec<usize> = (0..n).collect();
    let batch = ds.batch(&idx);
    let mut tape = Tape::new();
    let x = tape.leaf(&batch);
    let fwd = teacher.forward(&mut tape, x, BnMode::Measure).unwrap();
    println!("{} ({n} images)", &args[2]);
    let mut total = 0.0;
    for (bi, stats) in &fwd.stat_taps {
        let bn = teacher.blocks[*bi].bn.as_ref().unwrap();
        let v = tape.value(*stats);
        let c = bn.running_mean.len();
        let mut dm = 0.0;
        let mut dv = 0.0;
        for i in 0..c {
            dm += (v[i] - bn.running_mean[i]).powi(2);
            dv += (v[c + i] - bn.running_var[i]).powi(2);
        }
        let (dm, dv) = (dm.sqrt(), dv.sqrt());
        total += dm + dv;
        println!("  block {bi} (c={c}): |dmean| {dm:8.3}  |dvar| {dv:8.3}  sum {:8.3}", dm + dv);
    }
    println!("  total {total:.3}");
}
