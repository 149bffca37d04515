//! The stability probe and the scheduler's observation vector.

use serde::{Deserialize, Serialize};

use crate::envsim::{motion_signals, EnvState};
use crate::error::{input_err, Result};
use crate::numerics::Matrix;

/// `ξ = [ρ, v_grip, v_trans, v_rot, progress]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerObservation {
    pub rho: f64,
    pub v_grip: f64,
    pub v_trans: f64,
    pub v_rot: f64,
    pub progress: f64,
}

impl SchedulerObservation {
    pub const DIM: usize = 5;

    pub fn to_array(&self) -> [f64; 5] {
        [self.rho, self.v_grip, self.v_trans, self.v_rot, self.progress]
    }
}

/// Linear centered kernel alignment between two `T × d` matrices whose rows
/// are tokens.
pub fn cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return input_err(format!("cka of {:?} and {:?}", x.shape(), y.shape()));
    }
    if x.rows() < 2 {
        return input_err("cka needs at least two rows");
    }
    let xc = x.column_centered();
    let yc = y.column_centered();
    let x_zero = xc.data().iter().all(|&v| v == 0.0);
    let y_zero = yc.data().iter().all(|&v| v == 0.0);
    match (x_zero, y_zero) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let cross = yc.t_matmul(&xc)?.frobenius_sq();
    let xx = xc.t_matmul(&xc)?.frobenius();
    let yy = yc.t_matmul(&yc)?.frobenius();
    let v = cross / (xx * yy);
    Ok(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
}

pub fn build_observation(rho_latest: f64, prev: &EnvState, cur: &EnvState) -> Result<SchedulerObservation> {
    if !(0.0..=1.0).contains(&rho_latest) {
        return input_err(format!("rho {rho_latest} outside [0, 1]"));
    }
    let (v_grip, v_trans, v_rot) = motion_signals(prev, cur);
    Ok(SchedulerObservation {
        rho: rho_latest,
        v_grip,
        v_trans,
        v_rot,
        progress: cur.step as f64 / cur.t_max as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim;
    use crate::numerics::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, rng.draw_gaussian(rows * cols)).unwrap()
    }

    /// `HSIC(K, L) = tr(K H L H)` with `H = I - 11ᵀ/n`, on linear kernels.
    fn hsic_cka(x: &Matrix, y: &Matrix) -> f64 {
        let n = x.rows();
        let gram = |m: &Matrix| {
            let mut k = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    k[i][j] = (0..m.cols()).map(|c| m.get(i, c) * m.get(j, c)).sum();
                }
            }
            k
        };
        let center = |k: Vec<Vec<f64>>| {
            let mut out = vec![vec![0.0; n]; n];
            let row: Vec<f64> = (0..n).map(|i| k[i].iter().sum::<f64>() / n as f64).collect();
            let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i][j]).sum::<f64>() / n as f64).collect();
            let all: f64 = row.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                for j in 0..n {
                    out[i][j] = k[i][j] - row[i] - col[j] + all;
                }
            }
            out
        };
        let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += a[i][j] * b[j][i];
                }
            }
            s
        };
        let kc = center(gram(x));
        let lc = center(gram(y));
        hsic(&kc, &lc) / (hsic(&kc, &kc) * hsic(&lc, &lc)).sqrt()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random(8, 32, &mut Rng::new(1));
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_hsic_form() {
        let mut rng = Rng::new(13);
        let x = random(8, 32, &mut rng);
        let y = random(8, 32, &mut rng);
        assert!((cka(&x, &y).unwrap() - hsic_cka(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let zero = Matrix::zeros(4, 3);
        let constant_rows = Matrix::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        let x = random(4, 3, &mut Rng::new(2));
        assert_eq!(cka(&zero, &constant_rows).unwrap(), 1.0);
        assert_eq!(cka(&zero, &x).unwrap(), 0.0);
        assert_eq!(cka(&x, &constant_rows).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        assert!(cka(&Matrix::zeros(4, 3), &Matrix::zeros(4, 2)).is_err());
        assert!(cka(&Matrix::zeros(1, 3), &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn observation_examples() {
        let (s0, _) = envsim::reset(0);
        let s1 = envsim::step(&s0, &envsim::RobotAction::default()).unwrap().state;
        let o = build_observation(1.0, &s0, &s1).unwrap();
        assert_eq!(o.rho, 1.0);
        assert_eq!(o.progress, 1.0 / 200.0);
        assert_eq!((o.v_grip, o.v_trans, o.v_rot), (0.0, 0.0, 0.0));
        let mut s100 = s1.clone();
        s100.step = 100;
        assert_eq!(build_observation(0.5, &s1, &s100).unwrap().progress, 0.5);
        assert!(build_observation(1.5, &s0, &s1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numerics::Rng;

        fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
            any::<u64>().prop_map(|seed| {
                let mut rng = Rng::new(seed);
                (random(6, 5, &mut rng), random(6, 5, &mut rng))
            })
        }

        /// Orthogonal matrix from Gram-Schmidt on a Gaussian draw.
        fn orthogonal(n: usize, seed: u64) -> Matrix {
            let mut rng = Rng::new(seed);
            let mut cols: Vec<Vec<f64>> = Vec::new();
            while cols.len() < n {
                let mut v = rng.draw_gaussian(n);
                for c in &cols {
                    let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    cols.push(v.iter().map(|a| a / norm).collect());
                }
            }
            let mut q = Matrix::zeros(n, n);
            for (j, c) in cols.iter().enumerate() {
                for (i, v) in c.iter().enumerate() {
                    q.set(i, j, *v);
                }
            }
            q
        }

        proptest! {
            #[test]
            fn symmetric((x, y) in pair()) {
                prop_assert!((cka(&x, &y).unwrap() - cka(&y, &x).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn invariances((x, y) in pair(), seed in any::<u64>(), c in 0.1f64..10.0, off in prop::array::uniform5(-5.0f64..5.0)) {
                let base = cka(&x, &y).unwrap();
                let q = orthogonal(5, seed);
                prop_assert!((cka(&x.matmul(&q).unwrap(), &y).unwrap() - base).abs() < 1e-9);
                prop_assert!((cka(&x.scale(c), &y).unwrap() - base).abs() < 1e-9);
                prop_assert!((cka(&x.scale(-c), &y).unwrap() - base).abs() < 1e-9);
                let mut shifted = x.clone();
                for r in 0..shifted.rows() {
                    shifted.row_mut(r).iter_mut().zip(&off).for_each(|(v, o)| *v += o);
                }
                prop_assert!((cka(&shifted, &y).unwrap() - base).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&base));
            }
        }
    }
}
