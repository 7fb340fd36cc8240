//! Learned-step fake quantization. A quantizer owns a trainable step size
//! (and an offset for asymmetric activation quantization); the tape op it
//! emits rounds to a signed b-bit grid on the forward pass and routes
//! straight-through gradients on the backward pass, with the step
//! gradient rescaled by 1/sqrt(numel * q_max) to keep its updates
//! commensurate across layer sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{quant_range, Tape, ValueId};
use crate::tensor::Tensor;

pub const MIN_STEP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Weight,
    Activation,
}

#[derive(Clone, Debug)]
pub struct QuantizerParams {
    pub bits: u32,
    /// one-element tensor, always > 0
    pub step: Tensor,
    /// one-element tensor; present only for asymmetric quantizers
    pub offset: Option<Tensor>,
    pub kind: QuantKind,
    pub initialized: bool,
}

pub struct QuantizerNode {
    pub out: ValueId,
    pub step_id: ValueId,
    pub offset_id: Option<ValueId>,
}

impl QuantizerParams {
    pub fn new(bits: u32, kind: QuantKind, asymmetric: bool) -> Result<Self> {
        if bits != 32 && !(2..=16).contains(&bits) {
            return Err(Error::invalid("quantizer", format!("bits {bits} outside 2..=16 or 32")));
        }
        if asymmetric && kind == QuantKind::Weight {
            return Err(Error::invalid("quantizer", "weights quantize symmetrically"));
        }
        let step = Tensor::new(vec![1], vec![1.0])?.with_grad();
        let offset = if asymmetric { Some(Tensor::new(vec![1], vec![0.0])?.with_grad()) } else { None };
        Ok(QuantizerParams { bits, step, offset, kind, initialized: false })
    }

    pub fn q_min(&self) -> f64 {
        quant_range(self.bits).0
    }

    pub fn q_max(&self) -> f64 {
        quant_range(self.bits).1
    }

    pub fn step_value(&self) -> f64 {
        self.step.data()[0]
    }

    pub fn offset_value(&self) -> f64 {
        self.offset.as_ref().map(|o| o.data()[0]).unwrap_or(0.0)
    }

    /// Symmetric rule: s = 2 * mean(|x|) / sqrt(q_max). Asymmetric rule:
    /// span [min, max] exactly, i.e. s = (max - min) / (q_max - q_min)
    /// and offset = min - s * q_min. Degenerate samples floor the step at
    /// MIN_STEP.
    pub fn init_from_samples(&mut self, samples: &[f64]) {
        if self.bits == 32 {
            self.initialized = true;
            return;
        }
        let (q_min, q_max) = quant_range(self.bits);
        match &mut self.offset {
            None => {
                let mean_abs =
                    samples.iter().map(|x| x.abs()).sum::<f64>() / samples.len().max(1) as f64;
                let mut s = 2.0 * mean_abs / q_max.sqrt();
                if !(s > MIN_STEP) || !s.is_finite() {
                    log::warn!("quantizer init saw all-zero samples; flooring step at {MIN_STEP}");
                    s = MIN_STEP;
                }
                self.step.data_mut()[0] = s;
            }
            Some(offset) => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &x in samples {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                if !lo.is_finite() || !hi.is_finite() || hi - lo < MIN_STEP {
                    log::warn!("quantizer init saw degenerate samples; flooring step at {MIN_STEP}");
                    self.step.data_mut()[0] = MIN_STEP;
                    offset.data_mut()[0] = if lo.is_finite() { lo } else { 0.0 };
                } else {
                    let s = (hi - lo) / (q_max - q_min);
                    self.step.data_mut()[0] = s;
                    offset.data_mut()[0] = lo - s * q_min;
                }
            }
        }
        self.initialized = true;
    }

    /// Keep the step strictly positive after an optimizer update.
    pub fn clamp_step(&mut self) {
        let s = &mut self.step.data_mut()[0];
        if !(*s > MIN_STEP) {
            *s = MIN_STEP;
        }
    }

    /// Emit the fake-quantize node for `x`, registering step/offset as
    /// tape leaves so their gradients can be read back after backward.
    pub fn apply(&self, tape: &mut Tape, x: ValueId) -> Result<QuantizerNode> {
        let step_id = tape.leaf(&self.step);
        let offset_id = self.offset.as_ref().map(|o| tape.leaf(o));
        let out = tape.fake_quantize(x, step_id, offset_id, self.bits)?;
        Ok(QuantizerNode { out, step_id, offset_id })
    }
}

/// Scalar reference semantics of the fake-quantize op:
/// q = clip(round((x - offset) / step), q_min, q_max), y = q * step + offset
/// with round half away from zero.
pub fn fake_quantize_scalar(x: f64, step: f64, offset: f64, bits: u32) -> f64 {
    if bits == 32 {
        return x;
    }
    let (q_min, q_max) = quant_range(bits);
    let q = ((x - offset) / step).round().clamp(q_min, q_max);
    q * step + offset
}

/// Bit-width pair for a quantized run, e.g. W4A8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits_weight: u32,
    pub bits_act: u32,
    /// learnable offsets on activation quantizers
    pub asymmetric_act: bool,
}

impl QuantSpec {
    pub fn new(bits_weight: u32, bits_act: u32) -> Self {
        QuantSpec { bits_weight, bits_act, asymmetric_act: true }
    }

    /// Parse "w4a8" / "W6A6".
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let rest = lower
            .strip_prefix('w')
            .ok_or_else(|| Error::Config(format!("bad bit spec '{s}', want e.g. w4a8")))?;
        let (w, a) = rest
            .split_once('a')
            .ok_or_else(|| Error::Config(format!("bad bit spec '{s}', want e.g. w4a8")))?;
        let bw: u32 = w.parse().map_err(|_| Error::Config(format!("bad weight bits in '{s}'")))?;
        let ba: u32 = a.parse().map_err(|_| Error::Config(format!("bad act bits in '{s}'")))?;
        Ok(QuantSpec::new(bw, ba))
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.bits_weight, self.bits_act)
    }
}

impl std::fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rounding_is_half_away_from_zero() {
        // ties must not round to even
        assert_eq!(fake_quantize_scalar(0.5, 1.0, 0.0, 8), 1.0);
        assert_eq!(fake_quantize_scalar(-0.5, 1.0, 0.0, 8), -1.0);
        assert_eq!(fake_quantize_scalar(2.5, 1.0, 0.0, 8), 3.0);
        assert_eq!(fake_quantize_scalar(-2.5, 1.0, 0.0, 8), -3.0);
        assert_eq!(fake_quantize_scalar(1.5, 1.0, 0.0, 8), 2.0);
    }

    #[test]
    fn clip_range_is_twos_complement() {
        // b=4: codes -8..=7
        assert_eq!(fake_quantize_scalar(100.0, 0.5, 0.0, 4), 3.5);
        assert_eq!(fake_quantize_scalar(-100.0, 0.5, 0.0, 4), -4.0);
    }

    #[test]
    fn hand_values_b4() {
        let s = 0.5;
        assert_eq!(fake_quantize_scalar(-5.0, s, 0.0, 4), -4.0);
        assert_eq!(fake_quantize_scalar(-0.26, s, 0.0, 4), -0.5);
        assert_eq!(fake_quantize_scalar(0.24, s, 0.0, 4), 0.0);
        assert_eq!(fake_quantize_scalar(0.26, s, 0.0, 4), 0.5);
        assert_eq!(fake_quantize_scalar(10.0, s, 0.0, 4), 3.5);
    }

    /// Tape forward must agree exactly with the scalar reference over a
    /// dense random enumeration of (x, step, bits) triples.
    #[test]
    fn tape_forward_matches_scalar_oracle() {
        let mut rng = stream_rng(77, 1);
        for _ in 0..2000 {
            let bits = [2u32, 3, 4, 6, 8][rng.gen_range(0..5)];
            let s: f64 = 10f64.powf(rng.gen_range(-3.0..1.0));
            let beta: f64 = if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 };
            let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(vec![8], xs.clone()).unwrap();
            let sid = tape.scalar_const(s);
            let bid = tape.scalar_const(beta);
            let y = tape
                .fake_quantize(x, sid, if beta != 0.0 { Some(bid) } else { None }, bits)
                .unwrap();
            for (j, &xv) in xs.iter().enumerate() {
                let want = fake_quantize_scalar(xv, s, if beta != 0.0 { beta } else { 0.0 }, bits);
                let got = tape.value(y)[j];
                assert_eq!(got.to_bits(), want.to_bits(), "x={xv} s={s} beta={beta} b={bits}");
            }
        }
    }

    /// Straight-through oracle, written independently of the tape:
    /// dx = upstream inside the clip range else 0;
    /// ds = upstream * (round(v)-v | q_min | q_max) * 1/sqrt(n*q_max);
    /// dbeta = upstream on clipped elements.
    #[test]
    fn tape_backward_matches_ste_oracle() {
        let mut rng = stream_rng(78, 2);
        for _ in 0..500 {
            let bits = [2u32, 4, 8][rng.gen_range(0..3)];
            let (q_min, q_max) = quant_range(bits);
            let s: f64 = 10f64.powf(rng.gen_range(-2.0..0.5));
            let beta: f64 = rng.gen_range(-0.5..0.5);
            let n = rng.gen_range(1..12usize);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-15.0..15.0)).collect();
            let ws: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let mut tape = Tape::new();
            let x = {
                let t = Tensor::new(vec![n], xs.clone()).unwrap().with_grad();
                tape.leaf(&t)
            };
            let sid = {
                let t = Tensor::new(vec![1], vec![s]).unwrap().with_grad();
                tape.leaf(&t)
            };
            let bid = {
                let t = Tensor::new(vec![1], vec![beta]).unwrap().with_grad();
                tape.leaf(&t)
            };
            let y = tape.fake_quantize(x, sid, Some(bid), bits).unwrap();
            let w = tape.constant(vec![n], ws.clone()).unwrap();
            let prod = tape.mul(y, w).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss).unwrap();

            let gscale = 1.0 / ((n as f64) * q_max).sqrt();
            let mut want_ds = 0.0;
            let mut want_dbeta = 0.0;
            for j in 0..n {
                let v = (xs[j] - beta) / s;
                let (want_dx, ds_term, in_range) = if v < q_min {
                    (0.0, q_min, false)
                } else if v > q_max {
                    (0.0, q_max, false)
                } else {
                    (ws[j], v.round() - v, true)
                };
                let got_dx = tape.grad(x).unwrap()[j];
                assert!((got_dx - want_dx).abs() < 1e-12, "dx at {j}");
                want_ds += ws[j] * ds_term;
                if !in_range {
                    want_dbeta += ws[j];
                }
            }
            want_ds *= gscale;
            assert!((tape.grad(sid).unwrap()[0] - want_ds).abs() < 1e-9, "ds");
            assert!((tape.grad(bid).unwrap()[0] - want_dbeta).abs() < 1e-9, "dbeta");
        }
    }

    #[test]
    fn symmetric_init_rule_exact() {
        // all samples at |x| = c gives s = 2c / sqrt(q_max)
        let mut q = QuantizerParams::new(8, QuantKind::Weight, false).unwrap();
        let c = 0.37;
        q.init_from_samples(&[c, -c, c, -c]);
        let want = 2.0 * c / 127f64.sqrt();
        assert!((q.step_value() - want).abs() < 1e-15);
        assert!(q.initialized);
    }

    #[test]
    fn zero_samples_floor_the_step() {
        let mut q = QuantizerParams::new(8, QuantKind::Weight, false).unwrap();
        q.init_from_samples(&[0.0; 16]);
        assert_eq!(q.step_value(), MIN_STEP);
    }

    #[test]
    fn asymmetric_init_spans_min_max() {
        let mut q = QuantizerParams::new(8, QuantKind::Activation, true).unwrap();
        let samples = [-0.2, 0.1, 1.7, 0.4];
        q.init_from_samples(&samples);
        let s = q.step_value();
        let beta = q.offset_value();
        // endpoints land exactly on the code grid
        assert!((fake_quantize_scalar(-0.2, s, beta, 8) - -0.2).abs() < 1e-12);
        assert!((fake_quantize_scalar(1.7, s, beta, 8) - 1.7).abs() < 1e-12);
        // interior points stay within half a step
        for x in [0.0, 0.3, 1.0, 1.5] {
            assert!((fake_quantize_scalar(x, s, beta, 8) - x).abs() <= s / 2.0 + 1e-12);
        }
    }

    /// Grid-search oracle: the init rule's reconstruction MSE on normal
    /// samples, compared to the best step from a dense log-spaced search.
    /// At 3 bits the rule's clip point (~4.8 sigma) sits near the optimum
    /// and lands within 2x of the best MSE. At wider widths the rule
    /// deliberately over covers (clip at ~18 sigma for 8 bits), trading
    /// MSE for clip-free early gradients, and the measured ratios (2.60
    /// at b=4, 20.1 at b=8) are frozen as regression bounds.
    #[test]
    fn init_rule_vs_grid_search() {
        let mut rng = stream_rng(79, 3);
        let xs: Vec<f64> = (0..4096).map(|_| crate::tensor::randn_scalar(&mut rng)).collect();
        let mse = |s: f64, bits: u32| -> f64 {
            xs.iter()
                .map(|&x| {
                    let d = fake_quantize_scalar(x, s, 0.0, bits) - x;
                    d * d
                })
                .sum::<f64>()
                / xs.len() as f64
        };
        let best = |bits: u32| -> f64 {
            let max_abs = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let (_, q_max) = quant_range(bits);
            let hi = 2.0 * max_abs;
            let lo = hi / q_max / 64.0;
            let mut best_mse = f64::INFINITY;
            for i in 0..100 {
                let s = lo * (hi / lo).powf(i as f64 / 99.0);
                best_mse = best_mse.min(mse(s, bits));
            }
            best_mse
        };
        for (bits, factor) in [(3u32, 2.0), (4u32, 2.8), (8u32, 22.0)] {
            let mut q = QuantizerParams::new(bits, QuantKind::Weight, false).unwrap();
            q.init_from_samples(&xs);
            let init_mse = mse(q.step_value(), bits);
            let best_mse = best(bits);
            assert!(
                init_mse <= factor * best_mse,
                "b={bits}: init mse {init_mse:.6e} vs best {best_mse:.6e} (ratio {:.2})",
                init_mse / best_mse
            );
        }
    }

    #[test]
    fn rejects_bad_bits_and_asym_weights() {
        assert!(QuantizerParams::new(1, QuantKind::Weight, false).is_err());
        assert!(QuantizerParams::new(17, QuantKind::Weight, false).is_err());
        assert!(QuantizerParams::new(32, QuantKind::Weight, false).is_ok());
        assert!(QuantizerParams::new(8, QuantKind::Weight, true).is_err());
    }

    #[test]
    fn parse_bit_specs() {
        let q = QuantSpec::parse("w4a8").unwrap();
        assert_eq!((q.bits_weight, q.bits_act), (4, 8));
        assert_eq!(QuantSpec::parse("W6A6").unwrap().label(), "W6A6");
        assert!(QuantSpec::parse("4a8").is_err());
        assert!(QuantSpec::parse("w4b8").is_err());
    }

    proptest! {
        /// In-range inputs reconstruct within half a step.
        #[test]
        fn within_half_step_inside_range(
            x in -1.0f64..1.0,
            s in 0.01f64..0.5,
            bits in 2u32..9,
        ) {
            let (q_min, q_max) = quant_range(bits);
            // keep x strictly inside the representable span
            prop_assume!(x > q_min * s && x < q_max * s);
            let y = fake_quantize_scalar(x, s, 0.0, bits);
            prop_assert!((y - x).abs() <= s / 2.0 + 1e-12);
        }

        /// Quantization is idempotent.
        #[test]
        fn idempotent(
            x in -50.0f64..50.0,
            s in 0.001f64..2.0,
            beta in -1.0f64..1.0,
            bits in 2u32..9,
        ) {
            let y = fake_quantize_scalar(x, s, beta, bits);
            let z = fake_quantize_scalar(y, s, beta, bits);
            prop_assert_eq!(y.to_bits(), z.to_bits());
        }

        /// Quantization is monotone.
        #[test]
        fn monotone(
            a in -50.0f64..50.0,
            b in -50.0f64..50.0,
            s in 0.001f64..2.0,
            bits in 2u32..9,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ya = fake_quantize_scalar(lo, s, 0.0, bits);
            let yb = fake_quantize_scalar(hi, s, 0.0, bits);
            prop_assert!(ya <= yb);
        }

        /// Outputs always land on the code grid.
        #[test]
        fn outputs_on_grid(
            x in -50.0f64..50.0,
            s in 0.001f64..2.0,
            bits in 2u32..9,
        ) {
            let y = fake_quantize_scalar(x, s, 0.0, bits);
            let code = y / s;
            let (q_min, q_max) = quant_range(bits);
            prop_assert!(code.round() >= q_min && code.round() <= q_max);
            prop_assert!((code - code.round()).abs() < 1e-9);
        }
    }
}
