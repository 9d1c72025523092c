//! Compound soft-Dice + binary cross-entropy loss.
//!
//! `loss = 0.5·(1 − softDice) + 0.5·BCE` with
//! `softDice = (2·Σp·y + ε) / (Σp + Σy + ε)` over the whole batch and BCE
//! averaged over voxels, computed on probabilities clamped to
//! `[P_MIN, P_MAX]`. Gradients are the exact derivatives of that clamped
//! function (zero BCE slope outside the clamp).

use super::kernels::sigmoid;
use super::real::Real;

pub const DICE_EPS: f64 = 1e-5;
pub const P_MIN: f64 = 1e-7;
pub const P_MAX: f64 = 1.0 - 1e-7;

struct Sums {
    inter: f64,
    sp: f64,
    sy: f64,
}

fn sums<T: Real>(p: &[T], y: &[T]) -> Sums {
    let mut s = Sums { inter: 0.0, sp: 0.0, sy: 0.0 };
    for (&a, &b) in p.iter().zip(y) {
        let (a, b) = (a.to_f64(), b.to_f64());
        s.inter += a * b;
        s.sp += a;
        s.sy += b;
    }
    s
}

fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(P_MIN, P_MAX);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

fn bce_slope(p: f64, y: f64) -> f64 {
    if !(P_MIN..=P_MAX).contains(&p) {
        return 0.0;
    }
    -(y / p - (1.0 - y) / (1.0 - p))
}

/// Loss value for probabilities `p` and binary labels `y`.
pub fn compound_loss<T: Real>(p: &[T], y: &[T]) -> T {
    assert_eq!(p.len(), y.len(), "loss: shape mismatch");
    let s = sums(p, y);
    let dice = (2.0 * s.inter + DICE_EPS) / (s.sp + s.sy + DICE_EPS);
    let n = p.len() as f64;
    let b = p.iter().zip(y).map(|(&a, &t)| bce(a.to_f64(), t.to_f64())).sum::<f64>() / n;
    T::from_f64(0.5 * (1.0 - dice) + 0.5 * b)
}

/// Loss and d(loss)/d(p).
pub fn compound_loss_grad<T: Real>(p: &[T], y: &[T]) -> (T, Vec<T>) {
    assert_eq!(p.len(), y.len(), "loss: shape mismatch");
    let s = sums(p, y);
    let den = s.sp + s.sy + DICE_EPS;
    let num = 2.0 * s.inter + DICE_EPS;
    let n = p.len() as f64;
    let mut b = 0.0;
    let g = p
        .iter()
        .zip(y)
        .map(|(&a, &t)| {
            let (a, t) = (a.to_f64(), t.to_f64());
            b += bce(a, t);
            let dd = (2.0 * t * den - num) / (den * den);
            T::from_f64(-0.5 * dd + 0.5 * bce_slope(a, t) / n)
        })
        .collect();
    (T::from_f64(0.5 * (1.0 - num / den) + 0.5 * b / n), g)
}

/// Loss of `sigmoid(z)` and d(loss)/d(z).
pub fn loss_and_logit_grad<T: Real>(z: &[T], y: &[T]) -> (T, Vec<T>) {
    let p: Vec<T> = z.iter().map(|&v| sigmoid(v)).collect();
    let (l, mut g) = compound_loss_grad(&p, y);
    for (gi, &pi) in g.iter_mut().zip(&p) {
        *gi = *gi * pi * (T::ONE - pi);
    }
    (l, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = [0.0, 1.0, 1.0, 0.0, 0.0f64];
        assert!(compound_loss(&y, &y) <= 1e-5);
        assert!(compound_loss(&y, &y) >= 0.0);
    }

    #[test]
    fn half_probability_bce() {
        let y = [0.0, 1.0, 1.0, 0.0f64];
        let p = [0.5f64; 4];
        let s = sums(&p, &y);
        let dice = (2.0 * s.inter + DICE_EPS) / (s.sp + s.sy + DICE_EPS);
        let bce_term = 2.0 * compound_loss(&p, &y) - (1.0 - dice);
        assert!((bce_term - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p: Vec<f64> = (0..20).map(|i| 0.05 + 0.9 * ((i * 7 % 20) as f64) / 20.0).collect();
        let y: Vec<f64> = (0..20).map(|i| ((i * 3) % 5 == 0) as u8 as f64).collect();
        let (_, g) = compound_loss_grad(&p, &y);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (compound_loss(&a, &y) - compound_loss(&b, &y)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }
}
