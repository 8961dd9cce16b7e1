//! Adversarial losses on discriminator scores in `(0, 1)`.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to every log argument.
pub const LOG_FLOOR: f32 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeneratorLoss {
    /// `-mean(log D(G(z)))`.
    #[default]
    NonSaturating,
    /// `mean(log(1 - D(G(z))))`.
    Minimax,
}

impl GeneratorLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorLoss::NonSaturating => "non_saturating",
            GeneratorLoss::Minimax => "minimax",
        }
    }
}

impl fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            "minimax" => Ok(GeneratorLoss::Minimax),
            _ => Err(Error::Usage(format!("unknown generator loss {s:?}"))),
        }
    }
}

fn mean_log(tape: &mut Tape<'_>, x: Var) -> Var {
    let l = tape.log_clamped(x, LOG_FLOOR);
    tape.mean(l)
}

fn mean_log_complement(tape: &mut Tape<'_>, x: Var) -> Var {
    let c = tape.affine(x, -1.0, 1.0);
    mean_log(tape, c)
}

fn finite(tape: &Tape<'_>, v: Var, what: &str) -> Result<Var> {
    let x = tape.scalar(v);
    if x.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {x}")))
    }
}

/// `-mean(log D(x)) - mean(log(1 - D(G(z))))`.
pub fn d_loss(tape: &mut Tape<'_>, real: Var, fake: Var) -> Result<Var> {
    let r = mean_log(tape, real);
    let f = mean_log_complement(tape, fake);
    let s = tape.add(r, f)?;
    let loss = tape.affine(s, -1.0, 0.0);
    finite(tape, loss, "discriminator loss")
}

pub fn g_loss(tape: &mut Tape<'_>, fake: Var, variant: GeneratorLoss) -> Result<Var> {
    let loss = match variant {
        GeneratorLoss::NonSaturating => {
            let m = mean_log(tape, fake);
            tape.affine(m, -1.0, 0.0)
        }
        GeneratorLoss::Minimax => mean_log_complement(tape, fake),
    };
    finite(tape, loss, "generator loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ln;
    use crate::tensor::Tensor;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(tape: &mut Tape<'_>, v: &[f32]) -> Var {
        tape.input(Tensor::new([v.len(), 1], v.to_vec()).unwrap(), false)
    }

    #[test]
    fn analytic_values() {
        let mut t = Tape::new();
        let (r, f) = (scores(&mut t, &[1.0, 1.0]), scores(&mut t, &[0.0, 0.0]));
        let l = d_loss(&mut t, r, f).unwrap();
        assert!(t.scalar(l).abs() < 1e-6);

        let half = scores(&mut t, &[0.5; 4]);
        let l = d_loss(&mut t, half, half).unwrap();
        assert!((t.scalar(l) - 1.386_294_4).abs() < 1e-6);
        let mm = g_loss(&mut t, half, GeneratorLoss::Minimax).unwrap();
        let ns = g_loss(&mut t, half, GeneratorLoss::NonSaturating).unwrap();
        assert!((t.scalar(mm) + 0.693_147_2).abs() < 1e-6);
        assert!((t.scalar(ns) - 0.693_147_2).abs() < 1e-6);

        let win = scores(&mut t, &[1.0; 3]);
        let ns = g_loss(&mut t, win, GeneratorLoss::NonSaturating).unwrap();
        assert_eq!(t.scalar(ns), 0.0);
    }

    #[test]
    fn matches_direct_formula_and_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real: Vec<f32> = (0..16).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let fake: Vec<f32> = (0..16).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let n = 16.0f64;
        let lg = |x: f32| ln(x.max(LOG_FLOOR)) as f64;
        let d = -real.iter().map(|&x| lg(x)).sum::<f64>() / n - fake.iter().map(|&x| lg(1.0 - x)).sum::<f64>() / n;
        let g = -fake.iter().map(|&x| lg(x)).sum::<f64>() / n;
        let mut t = Tape::new();
        let (r, f) = (scores(&mut t, &real), scores(&mut t, &fake));
        let dl = d_loss(&mut t, r, f).unwrap();
        let gl = g_loss(&mut t, f, GeneratorLoss::NonSaturating).unwrap();
        assert!((t.scalar(dl) as f64 - d).abs() < 1e-6);
        assert!((t.scalar(gl) as f64 - g).abs() < 1e-6);

        let bound = -2.0 * ln(LOG_FLOOR);
        let (r, f) = (scores(&mut t, &[0.0, 0.0]), scores(&mut t, &[1.0, 1.0]));
        let worst = d_loss(&mut t, r, f).unwrap();
        assert!(t.scalar(worst) <= bound + 1e-5 && t.scalar(worst) > bound - 1e-3);
    }

    #[test]
    fn gradient_through_clamp() {
        let mut t = Tape::new();
        let f = t.input(Tensor::new([2, 1], alloc::vec![0.25, 0.5]).unwrap(), true);
        let l = g_loss(&mut t, f, GeneratorLoss::NonSaturating).unwrap();
        let g = t.backward(l).unwrap();
        let g = g.get(f).unwrap();
        assert!((g[0] + 0.5 / 0.25).abs() < 1e-5);
        assert!((g[1] + 0.5 / 0.5).abs() < 1e-5);
    }

    #[test]
    fn nan_scores_are_numerical_failures() {
        let mut t = Tape::new();
        let r = scores(&mut t, &[f32::NAN]);
        let f = scores(&mut t, &[0.5]);
        assert!(matches!(d_loss(&mut t, r, f), Err(Error::Numerical(_))));
    }

    #[test]
    fn parses_variants() {
        assert_eq!("minimax".parse::<GeneratorLoss>().unwrap(), GeneratorLoss::Minimax);
        assert_eq!(GeneratorLoss::default().as_str(), "non_saturating");
        assert!("wasserstein".parse::<GeneratorLoss>().is_err());
    }
}
