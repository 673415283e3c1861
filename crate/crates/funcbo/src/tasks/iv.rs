//! Synthetic instrumental-variable regression.
//!
//! Four latents `z ~ U(0,1)^4`: the first three are observed instruments
//! `x`, the fourth is a hidden confounder `c`. The treatment mixes all four
//! through a fixed linear embedding plus noise; the outcome adds the
//! confounder back in, so direct regression of `o` on `t` is biased while
//! regressing through the instruments is not:
//!
//! ```text
//! t = Emb [x, c] + N(0, sigma_t^2 I)
//! o = f_struct(t) + kappa (c - 1/2) + N(0, sigma_o^2)
//! f_struct(t) = (|A t|^2 - c0) / c1
//! ```
//!
//! `A` has entries `U(0,1)`; `c0`, `c1` center and scale `f_struct` to mean
//! 0 / standard deviation 1 over a 100 000-sample pilot draw and are stored
//! with the instance so a saved instance replays exactly. The structural
//! function is quadratic in `t`, so a linear model on degree-2 polynomial
//! features of `t` can represent it exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::funcid::Dataset;
use crate::losses::Label;
use crate::models::{FeatureMap, ParamVector};
use crate::numkit::{Mat, Rng};
use crate::{Error, Result};

pub const IV_INSTRUMENTS: usize = 3;
pub const IV_LATENTS: usize = IV_INSTRUMENTS + 1;
pub const IV_D_T_DEFAULT: usize = 16;
pub const IV_SIGMA_T: f64 = 0.1;
pub const IV_SIGMA_O: f64 = 0.5;
pub const IV_KAPPA: f64 = 32.0;
const PILOT_SAMPLES: usize = 100_000;

#[derive(Debug, Clone)]
pub struct IvInstance {
    pub d_t: usize,
    /// Latent-to-treatment embedding, `d_t x 4`, entries `U(-1,1)`.
    pub emb: Mat,
    /// Structural quadratic form factor, `4 x d_t`, entries `U(0,1)`.
    pub a: Mat,
    pub sigma_t: f64,
    pub sigma_o: f64,
    pub kappa: f64,
    pub c0: f64,
    pub c1: f64,
}

impl IvInstance {
    /// Draws `A` and `Emb`, then pilots `c0`/`c1` on a dedicated stream so
    /// instance constants never depend on how much data is generated later.
    pub fn generate(d_t: usize, seed: u64) -> Result<IvInstance> {
        if d_t == 0 {
            return Err(Error::InvalidArg {
                op: "IvInstance::generate",
                reason: "treatment dimension must be >= 1".into(),
            });
        }
        let mut rng = Rng::with_stream(seed, 0x49564745); // stream tag: instance generator
        let emb_data: Vec<f64> = (0..d_t * IV_LATENTS)
            .map(|_| rng.uniform_in(-1.0, 1.0))
            .collect();
        let emb = Mat::from_vec(d_t, IV_LATENTS, emb_data)?;
        let a = Mat::from_vec(IV_LATENTS, d_t, rng.uniform_vec(IV_LATENTS * d_t))?;

        let mut inst = IvInstance {
            d_t,
            emb,
            a,
            sigma_t: IV_SIGMA_T,
            sigma_o: IV_SIGMA_O,
            kappa: IV_KAPPA,
            c0: 0.0,
            c1: 1.0,
        };
        let mut pilot_rng = Rng::with_stream(seed, 0x50494c4f); // stream tag: pilot
        let mut vals = Vec::with_capacity(PILOT_SAMPLES);
        for _ in 0..PILOT_SAMPLES {
            let latent = pilot_rng.uniform_vec(IV_LATENTS);
            let t = inst.treatment_of(&latent, &mut pilot_rng)?;
            vals.push(inst.quadratic_form(&t)?);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (vals.len() - 1) as f64;
        inst.c0 = mean;
        inst.c1 = var.sqrt();
        Ok(inst)
    }

    fn quadratic_form(&self, t: &[f64]) -> Result<f64> {
        let at = self.a.matvec(t)?;
        Ok(crate::numkit::dot(&at, &at))
    }

    /// The normalized structural function `(|A t|^2 - c0) / c1`.
    pub fn f_struct(&self, t: &[f64]) -> Result<f64> {
        Ok((self.quadratic_form(t)? - self.c0) / self.c1)
    }

    fn treatment_of(&self, latent: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let mut t = self.emb.matvec(latent)?;
        if self.sigma_t > 0.0 {
            for v in t.iter_mut() {
                *v += self.sigma_t * rng.normal();
            }
        }
        Ok(t)
    }

    /// Samples `n` records `(x = instruments, t, o)`.
    pub fn gen_data(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidArg {
                op: "IvInstance::gen_data",
                reason: "n must be >= 1".into(),
            });
        }
        let mut xs = Mat::zeros(n, IV_INSTRUMENTS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let latent = rng.uniform_vec(IV_LATENTS);
            xs.row_mut(i).copy_from_slice(&latent[..IV_INSTRUMENTS]);
            let c = latent[IV_LATENTS - 1];
            let t = self.treatment_of(&latent, rng)?;
            let o = self.f_struct(&t)? + self.kappa * (c - 0.5) + self.sigma_o * rng.normal();
            labels.push(Label::Iv {
                treatment: t,
                outcome: vec![o],
            });
        }
        Dataset::new(xs, labels)
    }

    /// Out-of-sample structural error `mean (f(t) - f_struct(t))^2` over
    /// test treatments built from latents on an even grid (cell centers,
    /// lexicographic order) with fresh treatment noise.
    pub fn structural_mse(
        &self,
        f: &dyn Fn(&[f64]) -> f64,
        n_test: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        if n_test == 0 {
            return Err(Error::InvalidArg {
                op: "IvInstance::structural_mse",
                reason: "n_test must be >= 1".into(),
            });
        }
        let g = (n_test as f64).powf(0.25).ceil() as usize;
        let mut total = 0.0;
        let mut count = 0usize;
        'outer: for i0 in 0..g {
            for i1 in 0..g {
                for i2 in 0..g {
                    for i3 in 0..g {
                        let latent = [
                            (i0 as f64 + 0.5) / g as f64,
                            (i1 as f64 + 0.5) / g as f64,
                            (i2 as f64 + 0.5) / g as f64,
                            (i3 as f64 + 0.5) / g as f64,
                        ];
                        let t = self.treatment_of(&latent, rng)?;
                        let diff = f(&t) - self.f_struct(&t)?;
                        total += diff * diff;
                        count += 1;
                        if count == n_test {
                            break 'outer;
                        }
                    }
                }
            }
        }
        Ok(total / count as f64)
    }

    /// Writes the instance constants (versioned text format) so a run can
    /// be replayed without re-piloting.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(
            out,
            "FUNCBO-IVINST v1 {} {} {} {} {} {}",
            self.d_t, self.sigma_t, self.sigma_o, self.kappa, self.c0, self.c1
        )
        .expect("string write");
        for i in 0..self.emb.rows() {
            writeln!(out, "emb {}", join_floats(self.emb.row(i))).expect("string write");
        }
        for i in 0..self.a.rows() {
            writeln!(out, "a {}", join_floats(self.a.row(i))).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<IvInstance> {
        let text = std::fs::read_to_string(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 8 || fields[0] != "FUNCBO-IVINST" || fields[1] != "v1" {
            return Err(bad("expected header 'FUNCBO-IVINST v1 ...'"));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| bad(&format!("bad numeric field '{s}'")))
        };
        let d_t: usize = fields[2]
            .parse()
            .map_err(|_| bad("bad treatment dimension"))?;
        let (sigma_t, sigma_o) = (parse(fields[3])?, parse(fields[4])?);
        let (kappa, c0, c1) = (parse(fields[5])?, parse(fields[6])?, parse(fields[7])?);

        let mut emb_rows = Vec::new();
        let mut a_rows = Vec::new();
        for line in lines {
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad("malformed matrix row"))?;
            let row: Vec<f64> = rest
                .split_whitespace()
                .map(parse)
                .collect::<Result<Vec<f64>>>()?;
            match tag {
                "emb" => emb_rows.push(row),
                "a" => a_rows.push(row),
                other => return Err(bad(&format!("unknown row tag '{other}'"))),
            }
        }
        if emb_rows.len() != d_t || a_rows.len() != IV_LATENTS {
            return Err(bad("matrix row counts do not match the header"));
        }
        Ok(IvInstance {
            d_t,
            emb: Mat::from_rows(&emb_rows)?,
            a: Mat::from_rows(&a_rows)?,
            sigma_t,
            sigma_o,
            kappa,
            c0,
            c1,
        })
    }
}

fn join_floats(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Degree-2 polynomial features of the treatment — the outer model class
/// (`f_struct` is exactly in its span).
pub fn outer_features() -> FeatureMap {
    FeatureMap::Poly2
}

/// Ridge fit of `o` on features of `t` directly, ignoring the instruments —
/// the confounded baseline. Returns the weight vector for
/// `f(t) = w . q(t)`.
pub fn direct_regression(data: &Dataset, features: &FeatureMap, ridge: f64) -> Result<ParamVector> {
    let n = data.len();
    let (t0, _) = data.label(0).iv("direct_regression")?;
    let d1 = features.dim(t0.len());
    let mut gram = Mat::zeros(d1, d1);
    let mut rhs = vec![0.0; d1];
    for i in 0..n {
        let (t, o) = data.label(i).iv("direct_regression")?;
        let q = features.apply(t);
        for (r, qr) in q.iter().enumerate() {
            crate::numkit::axpy(gram.row_mut(r), qr / n as f64, &q);
        }
        crate::numkit::axpy(&mut rhs, o[0] / n as f64, &q);
    }
    gram.add_scaled_identity(ridge);
    let w = crate::numkit::spd_solve(&gram, &rhs)?;
    Ok(ParamVector::from_vec(w))
}

/// Convenience: dataset wrapped for sharing across problem levels.
pub fn shared(data: Dataset) -> Arc<Dataset> {
    Arc::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_outcome_equals_structural_value() {
        let mut inst = IvInstance::generate(8, 5).unwrap();
        inst.sigma_t = 0.0;
        inst.sigma_o = 0.0;
        inst.kappa = 0.0;
        let mut rng = Rng::new(9);
        let data = inst.gen_data(50, &mut rng).unwrap();
        for i in 0..data.len() {
            let (t, o) = data.label(i).iv("test").unwrap();
            let f = inst.f_struct(t).unwrap();
            assert!((o[0] - f).abs() < 1e-12);
        }
    }

    #[test]
    fn pilot_normalizes_structural_moments() {
        let inst = IvInstance::generate(IV_D_T_DEFAULT, 11).unwrap();
        // fresh draw: moments should be near (0, 1) but not exactly
        let mut rng = Rng::new(13);
        let n = 20_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let latent = rng.uniform_vec(IV_LATENTS);
            let t = inst.treatment_of(&latent, &mut rng).unwrap();
            vals.push(inst.f_struct(&t).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn structural_mse_is_zero_for_the_truth_and_unit_for_zero() {
        let inst = IvInstance::generate(IV_D_T_DEFAULT, 17).unwrap();
        let mut rng = Rng::new(19);
        let truth = |t: &[f64]| inst.f_struct(t).unwrap();
        assert_eq!(inst.structural_mse(&truth, 2000, &mut rng).unwrap(), 0.0);
        let zero = |_: &[f64]| 0.0;
        let mse0 = inst.structural_mse(&zero, 4096, &mut rng).unwrap();
        // grid latents reweight the distribution slightly; stay loose
        assert!((mse0 - 1.0).abs() < 0.2, "zero-predictor mse {mse0}");
    }

    #[test]
    fn instance_roundtrips_through_file() {
        let inst = IvInstance::generate(6, 23).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instance.txt");
        inst.save(&path).unwrap();
        let back = IvInstance::load(&path).unwrap();
        assert_eq!(inst.c0.to_bits(), back.c0.to_bits());
        assert_eq!(inst.c1.to_bits(), back.c1.to_bits());
        assert_eq!(inst.emb.data(), back.emb.data());
        assert_eq!(inst.a.data(), back.a.data());
        // identical data from identical instance + seed
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(1);
        let d1 = inst.gen_data(20, &mut r1).unwrap();
        let d2 = back.gen_data(20, &mut r2).unwrap();
        assert_eq!(d1.xs.data(), d2.xs.data());
    }

    #[test]
    fn confounding_biases_direct_regression() {
        // with kappa != 0, E[o | t] != f_struct(t): the direct fit must be
        // measurably worse than the true structural function
        let inst = IvInstance::generate(IV_D_T_DEFAULT, 29).unwrap();
        let mut rng = Rng::new(31);
        let data = inst.gen_data(4000, &mut rng).unwrap();
        let w = direct_regression(&data, &outer_features(), 1e-8).unwrap();
        let q = outer_features();
        let fit = |t: &[f64]| crate::numkit::dot(w.as_slice(), &q.apply(t));
        let mse = inst.structural_mse(&fit, 4096, &mut rng).unwrap();
        assert!(mse > 0.05, "direct regression mse {mse} suspiciously small");
    }
}
