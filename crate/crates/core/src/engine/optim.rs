use nalgebra::{DMatrix, DVector};

use super::objective::Objective;
use crate::error::Result;

/// Backtracking halvings allowed per line search.
const MAX_HALVINGS: usize = 30;
const ARMIJO_C1: f64 = 1e-4;

#[derive(Debug, Clone)]
pub(crate) struct OptOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting value first.
    pub trace: Vec<f64>,
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Armijo backtracking from step 1. Evaluation failures count as rejections.
fn line_search<O: Objective>(
    obj: &O,
    x: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let slope = dot(g, d);
    let mut alpha = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let xn: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        if let Ok(fv) = obj.value(&xn) {
            if fv.is_finite() && fv <= f + ARMIJO_C1 * alpha * slope {
                return Some((xn, fv));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// BFGS on the inverse Hessian. `h0` seeds the inverse Hessian; without it
/// the first step uses `I / scale` and is rescaled after one step.
pub(crate) fn bfgs<O: Objective>(
    obj: &O,
    x0: Vec<f64>,
    h0: Option<&DMatrix<f64>>,
    scale: f64,
    gtol: f64,
    max_iter: usize,
) -> Result<OptOutcome> {
    let p = x0.len();
    let (mut f, mut g) = obj.value_grad(&x0)?;
    let mut x = x0;
    let seeded = h0.is_some();
    let mut h = h0
        .cloned()
        .unwrap_or_else(|| DMatrix::identity(p, p) / scale.max(1.0));
    let mut rescale = !seeded;
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = inf_norm(&g) <= gtol;
    while !converged && iterations < max_iter {
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        if dot(&g, &d) >= 0.0 {
            h = DMatrix::identity(p, p) / scale.max(1.0);
            rescale = true;
            d = g.iter().map(|v| -v / scale.max(1.0)).collect();
        }
        let Some((xn, _)) = line_search(obj, &x, f, &g, &d) else {
            break;
        };
        let (fn_, gn) = obj.value_grad(&xn)?;
        let s = DVector::from_iterator(p, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(p, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if rescale {
                h = DMatrix::identity(p, p) * (sy / yv.dot(&yv));
                rescale = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
        converged = inf_norm(&g) <= gtol;
    }
    Ok(OptOutcome {
        x,
        value: f,
        grad: g,
        iterations,
        converged,
        trace,
    })
}

/// Block structure of a parameter vector `[fixed | γ term 0 | γ term 1 ...]`
/// where every γ belongs to exactly one group and groups do not interact.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub n_fixed: usize,
    pub n_terms: usize,
    pub n_groups: usize,
}

impl Layout {
    fn idx(&self, t: usize, g: usize) -> usize {
        self.n_fixed + t * self.n_groups + g
    }
}

/// Finite-difference Hessian of the analytic gradient, stored as the fixed
/// block `A`, the fixed×random block `B` and one small `T × T` block per group.
#[derive(Debug, Clone)]
pub(crate) struct StructuredHessian {
    layout: Layout,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: Vec<DMatrix<f64>>,
}

impl StructuredHessian {
    pub fn compute<O: Objective>(obj: &O, x: &[f64], layout: Layout) -> Result<Self> {
        let Layout {
            n_fixed: pf,
            n_terms: nt,
            n_groups: ng,
        } = layout;
        let nr = nt * ng;
        let mut a = DMatrix::zeros(pf, pf);
        let mut b = DMatrix::zeros(pf, nr);
        let mut d = vec![DMatrix::zeros(nt, nt); ng];
        let mut xp = x.to_vec();
        for j in 0..pf {
            let h = 1e-5 * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            let (_, gp) = obj.value_grad(&xp)?;
            xp[j] = x[j] - h;
            let (_, gm) = obj.value_grad(&xp)?;
            xp[j] = x[j];
            for i in 0..pf {
                a[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
            for r in 0..nr {
                b[(j, r)] = (gp[pf + r] - gm[pf + r]) / (2.0 * h);
            }
        }
        for t in 0..nt {
            let h = 1e-5;
            for g in 0..ng {
                xp[layout.idx(t, g)] += h;
            }
            let (_, gp) = obj.value_grad(&xp)?;
            for g in 0..ng {
                xp[layout.idx(t, g)] = x[layout.idx(t, g)] - h;
            }
            let (_, gm) = obj.value_grad(&xp)?;
            for g in 0..ng {
                xp[layout.idx(t, g)] = x[layout.idx(t, g)];
            }
            for (g, block) in d.iter_mut().enumerate() {
                for t2 in 0..nt {
                    let i = layout.idx(t2, g);
                    block[(t2, t)] = (gp[i] - gm[i]) / (2.0 * h);
                }
            }
        }
        a = (&a + a.transpose()) * 0.5;
        for block in &mut d {
            *block = (&*block + block.transpose()) * 0.5;
        }
        Ok(Self { layout, a, b, d })
    }

    pub fn factor(&self, ridge: f64) -> Option<Factored> {
        let Layout {
            n_fixed: pf,
            n_terms: nt,
            n_groups: ng,
        } = self.layout;
        let mut dinv = Vec::with_capacity(ng);
        for block in &self.d {
            let mut m = block.clone();
            for t in 0..nt {
                m[(t, t)] += ridge * m[(t, t)].abs().max(1.0);
            }
            let chol = m.cholesky()?;
            dinv.push(chol.inverse());
        }
        // M = D⁻¹ Bᵀ, row (t, g).
        let mut m = DMatrix::zeros(nt * ng, pf);
        for g in 0..ng {
            for t in 0..nt {
                for t2 in 0..nt {
                    let w = dinv[g][(t, t2)];
                    if w == 0.0 {
                        continue;
                    }
                    let src = self.layout.idx(t2, g) - pf;
                    for j in 0..pf {
                        m[(self.layout.idx(t, g) - pf, j)] += w * self.b[(j, src)];
                    }
                }
            }
        }
        let mut s = &self.a - &self.b * &m;
        s = (&s + s.transpose()) * 0.5;
        for j in 0..pf {
            s[(j, j)] += ridge * s[(j, j)].abs().max(1.0);
        }
        let s_chol = s.cholesky()?;
        let s_inv = s_chol.inverse();
        Some(Factored {
            layout: self.layout,
            dinv,
            m,
            b: self.b.clone(),
            s_inv,
        })
    }
}

pub(crate) struct Factored {
    layout: Layout,
    dinv: Vec<DMatrix<f64>>,
    m: DMatrix<f64>,
    b: DMatrix<f64>,
    s_inv: DMatrix<f64>,
}

impl Factored {
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let Layout {
            n_fixed: pf,
            n_terms: nt,
            n_groups: ng,
        } = self.layout;
        let rf = DVector::from_column_slice(&r[..pf]);
        let mut u = DVector::zeros(nt * ng);
        for g in 0..ng {
            for t in 0..nt {
                let mut acc = 0.0;
                for t2 in 0..nt {
                    acc += self.dinv[g][(t, t2)] * r[self.layout.idx(t2, g)];
                }
                u[self.layout.idx(t, g) - pf] = acc;
            }
        }
        let xf = &self.s_inv * (rf - &self.b * &u);
        let xr = u - &self.m * &xf;
        xf.iter().chain(xr.iter()).copied().collect()
    }

    /// Inverse Hessian restricted to the fixed coefficients.
    pub fn cov_fixed(&self) -> &DMatrix<f64> {
        &self.s_inv
    }

    /// Trace of the inverse Hessian over the γ entries of term `t`.
    pub fn trace_term(&self, t: usize) -> f64 {
        let Layout {
            n_fixed: pf,
            n_groups: ng,
            ..
        } = self.layout;
        let mut tr = 0.0;
        for g in 0..ng {
            tr += self.dinv[g][(t, t)];
            let row = self.m.row(self.layout.idx(t, g) - pf);
            tr += (row * &self.s_inv * row.transpose())[(0, 0)];
        }
        tr
    }
}

/// Damped Newton with the structured finite-difference Hessian; a ridge is
/// added while the Hessian is indefinite or the step fails to descend.
pub(crate) fn newton<O: Objective>(
    obj: &O,
    x0: Vec<f64>,
    layout: Layout,
    gtol: f64,
    max_iter: usize,
) -> Result<OptOutcome> {
    let (mut f, mut g) = obj.value_grad(&x0)?;
    let mut x = x0;
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = inf_norm(&g) <= gtol;
    while !converged && iterations < max_iter {
        iterations += 1;
        let hess = StructuredHessian::compute(obj, &x, layout)?;
        let mut ridge = 0.0;
        let mut step = None;
        for _ in 0..20 {
            if let Some(fac) = hess.factor(ridge) {
                let d: Vec<f64> = fac.solve(&g).into_iter().map(|v| -v).collect();
                if dot(&d, &g) < 0.0 {
                    if let Some(found) = line_search(obj, &x, f, &g, &d) {
                        step = Some(found);
                        break;
                    }
                }
            }
            ridge = if ridge == 0.0 { 1e-6 } else { ridge * 10.0 };
        }
        let Some((xn, _)) = step else {
            break;
        };
        let (fv, gv) = obj.value_grad(&xn)?;
        x = xn;
        f = fv;
        g = gv;
        trace.push(f);
        converged = inf_norm(&g) <= gtol;
    }
    Ok(OptOutcome {
        x,
        value: f,
        grad: g,
        iterations,
        converged,
        trace,
    })
}
