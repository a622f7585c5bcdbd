//! Fake-quantization primitives shared by training and integer export.
//!
//! Rounding is half-away-from-zero everywhere (`Float::round`), which is also
//! the requantization rule of the integer runtime.

use crate::scalar::Scalar;

/// Per-tensor affine parameters of a min-max weight quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams<T> {
    pub min: T,
    pub max: T,
    /// `(max - min) / (2^bits - 1)`; zero for a constant tensor.
    pub step: T,
    pub bits: u32,
}

impl<T: Scalar> AffineParams<T> {
    pub fn of(w: &[T], bits: u32) -> Self {
        let (min, max) = w.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let (min, max) = if w.is_empty() {
            (T::zero(), T::zero())
        } else {
            (min, max)
        };
        Self {
            min,
            max,
            step: (max - min) / T::of(levels(bits) as f64),
            bits,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.step == T::zero()
    }

    /// Step used for codes and bias scaling; a constant tensor is encoded
    /// with unit step and all-zero codes.
    pub fn code_step(&self) -> T {
        if self.is_degenerate() {
            T::one()
        } else {
            self.step
        }
    }

    pub fn code(&self, v: T) -> u32 {
        if self.is_degenerate() {
            return 0;
        }
        let q = ((v - self.min) / self.step).round();
        q.max(T::zero()).min(T::of(levels(self.bits) as f64)).as_f64() as u32
    }

    pub fn dequant(&self, code: u32) -> T {
        T::of(code as f64) * self.code_step() + self.min
    }

    /// Real-valued zero point such that `dequant(q) = (q - zp) * step`.
    pub fn zero_point(&self) -> T {
        -self.min / self.code_step()
    }
}

/// Highest code of a `bits`-wide unsigned quantizer.
pub fn levels(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

/// Min-max affine fake quantization. A constant tensor passes through
/// unchanged.
pub fn fake_quant_minmax<T: Scalar>(w: &[T], bits: u32) -> Vec<T> {
    let p = AffineParams::of(w, bits);
    if p.is_degenerate() {
        return w.to_vec();
    }
    w.iter().map(|&v| p.dequant(p.code(v))).collect()
}

/// 32-bit bias codes at scale `weight_step * input_scale`.
pub fn bias_codes<T: Scalar>(bias: &[T], weight_step: T, input_scale: T) -> Vec<i64> {
    let s = weight_step * input_scale;
    bias.iter().map(|&b| (b / s).round().as_f64() as i64).collect()
}

pub fn bias_dequant<T: Scalar>(codes: &[i64], weight_step: T, input_scale: T) -> Vec<T> {
    let s = weight_step * input_scale;
    codes.iter().map(|&c| T::of(c as f64) * s).collect()
}

/// Signed activation codes span `[-2^(b-1), 2^(b-1) - 1]`.
pub fn act_qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

pub fn act_qmin(bits: u32) -> i64 {
    -(1i64 << (bits - 1))
}

/// Activation step `alpha / 2^(b-1)`.
pub fn act_scale<T: Scalar>(alpha: T, bits: u32) -> T {
    alpha / T::of((1u64 << (bits - 1)) as f64)
}

/// Signed activation code after clipping to `[-alpha, alpha]`.
pub fn pact_code<T: Scalar>(x: T, alpha: T, bits: u32) -> i64 {
    let s = act_scale(alpha, bits);
    let q = (x.max(-alpha).min(alpha) / s).round().as_f64() as i64;
    q.clamp(act_qmin(bits), act_qmax(bits))
}

/// Signed clipped activation quantizer. Returns the dequantized values and
/// the integer codes (kept for the clip-bound gradient).
pub fn pact_forward<T: Scalar>(x: &[T], alpha: T, bits: u32) -> (Vec<T>, Vec<i64>) {
    let s = act_scale(alpha, bits);
    let codes: Vec<i64> = x.iter().map(|&v| pact_code(v, alpha, bits)).collect();
    let y = codes.iter().map(|&q| T::of(q as f64) * s).collect();
    (y, codes)
}

/// Gradients of the activation quantizer. Rounding is passed straight
/// through inside the clip range; the clip-bound gradient is the exact
/// derivative `code / 2^(b-1)` of `code * alpha / 2^(b-1)`.
pub fn pact_backward<T: Scalar>(x: &[T], codes: &[i64], alpha: T, bits: u32, grad_out: &[T]) -> (Vec<T>, T) {
    let half = T::of((1u64 << (bits - 1)) as f64);
    let mut g_alpha = T::zero();
    let gx = x
        .iter()
        .zip(codes)
        .zip(grad_out)
        .map(|((&v, &q), &g)| {
            g_alpha += g * T::of(q as f64) / half;
            if v > -alpha && v < alpha {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    (gx, g_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_nearest_levels() {
        let y = fake_quant_minmax(&[-1.0f64, -0.3, 0.2, 1.0], 2);
        let expect = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn grid_points_are_fixed() {
        // 4-bit grid over [-1, 2]
        let step = 3.0 / 15.0;
        let w: Vec<f64> = (0..16).map(|q| -1.0 + q as f64 * step).collect();
        let y = fake_quant_minmax(&w, 4);
        assert_eq!(y, w);
    }

    #[test]
    fn constant_tensor_unchanged() {
        let w = [0.7f64; 5];
        assert_eq!(fake_quant_minmax(&w, 2), w.to_vec());
    }

    #[test]
    fn eight_bit_code_of_half() {
        let p = AffineParams::of(&[-1.0f64, 0.5, 1.0], 8);
        assert_eq!(p.code(0.5), 191);
        assert!((p.dequant(191) - 0.498_039_215_686).abs() < 1e-9);
    }

    #[test]
    fn pact_examples() {
        let (y, _) = pact_forward(&[1.5f64, 0.0, 0.5], 1.0, 8);
        assert!(y[0] <= 1.0 && y[0] >= 1.0 - 1.0 / 128.0);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 0.5).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn pact_alpha_grad_on_clipped() {
        let x = [2.0f64, -3.0];
        let (_, q) = pact_forward(&x, 1.0, 8);
        let (gx, ga) = pact_backward(&x, &q, 1.0, 8, &[1.0, 1.0]);
        assert_eq!(q, vec![127, -128]);
        assert_eq!(gx, vec![0.0, 0.0]);
        assert_eq!(ga, -1.0 / 128.0);
        let (_, ga) = pact_backward(&x, &q, 1.0, 8, &[1.0, 0.0]);
        assert_eq!(ga, 127.0 / 128.0);
    }
}
