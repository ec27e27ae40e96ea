//! Finite-difference gradient checks.
//!
//! Every analytic gradient produced by the tape is compared against a central
//! difference `(f(x + h) − f(x − h)) / 2h` of a plain forward evaluation.
//! The error of one entry is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps near-zero gradients from turning round-off into huge
//! relative errors.

use std::fmt;

use rand::Rng;

use crate::diffusion::{actor_loss_on, DiffusionActor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Activation, Graph, Mlp, Tensor, Var};
use crate::rng::substream;
use crate::trainer::CriticPair;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Flip the sign of the tanh derivative on every tape (fault-injection fixture).
    pub inject_tanh_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            inject_tanh_fault: false,
        }
    }
}

impl GradCheckOptions {
    fn graph(&self) -> Graph {
        let mut g = Graph::new();
        if self.inject_tanh_fault {
            g.inject_tanh_derivative_fault();
        }
        g
    }
}

/// Outcome for one differentiated tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.max_rel_error)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheck> {
        self.checks
            .iter()
            .filter(|c| c.max_rel_error > self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "gradcheck {status}: {} checks, max relative error {:.3e} (tolerance {:.0e})",
            self.checks.len(),
            self.max_rel_error(),
            self.tolerance
        )?;
        if let Some(w) = self.worst() {
            writeln!(
                f,
                "worst: {} / {} entry {} (analytic {:.6e}, numeric {:.6e})",
                w.suite, w.name, w.worst_index, w.analytic, w.numeric
            )?;
        }
        for c in self.failures() {
            writeln!(
                f,
                "failed: {} / {}: {:.3e}",
                c.suite, c.name, c.max_rel_error
            )?;
        }
        Ok(())
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `loss` around `value`.
fn compare(
    suite: &'static str,
    name: String,
    value: &Tensor,
    analytic: &Tensor,
    h: f64,
    mut loss: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<GradCheck> {
    let mut probe = value.clone();
    let mut check = GradCheck {
        suite,
        name,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..value.len() {
        let x = value.data()[i];
        probe.data_mut()[i] = x + h;
        let up = loss(&probe)?;
        probe.data_mut()[i] = x - h;
        let down = loss(&probe)?;
        probe.data_mut()[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = rel_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!(
                "{suite} / {}: gradient entry {i}",
                check.name
            )));
        }
        if err > check.max_rel_error || i == 0 {
            check.max_rel_error = err;
            check.worst_index = i;
            check.analytic = a;
            check.numeric = numeric;
        }
    }
    Ok(check)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Values with `|x| ≥ gap`, so kinks at zero are never straddled.
fn away_from_zero<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn op_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<OpCase> {
    let (b, n) = (3, 4);
    let x = |rng: &mut R| uniform(rng, b, n, -1.0, 1.0);
    let mut cases = vec![
        OpCase {
            name: "affine",
            inputs: vec![
                x(rng),
                uniform(rng, n, 2, -1.0, 1.0),
                Tensor::vector(vec![0.3, -0.2]),
            ],
            build: |g, v| g.affine(v[0], v[1], v[2]),
        },
        OpCase {
            name: "tanh",
            inputs: vec![uniform(rng, b, n, -2.0, 2.0)],
            build: |g, v| Ok(g.tanh(v[0])),
        },
        OpCase {
            name: "relu",
            inputs: vec![away_from_zero(rng, b, n, 0.1)],
            build: |g, v| Ok(g.relu(v[0])),
        },
        OpCase {
            name: "exp",
            inputs: vec![x(rng)],
            build: |g, v| Ok(g.exp(v[0])),
        },
        OpCase {
            name: "log",
            inputs: vec![uniform(rng, b, n, 0.5, 2.0)],
            build: |g, v| Ok(g.log(v[0])),
        },
        OpCase {
            name: "square",
            inputs: vec![x(rng)],
            build: |g, v| Ok(g.square(v[0])),
        },
        OpCase {
            name: "clamp",
            inputs: vec![uniform(rng, b, n, -1.0, 1.0).map(|v| {
                if v.abs() > 0.45 && v.abs() < 0.55 {
                    v * 2.0
                } else {
                    v
                }
            })],
            build: |g, v| Ok(g.clamp(v[0], -0.5, 0.5)),
        },
        OpCase {
            name: "scale",
            inputs: vec![x(rng)],
            build: |g, v| Ok(g.scale(v[0], -1.7)),
        },
        OpCase {
            name: "offset",
            inputs: vec![x(rng)],
            build: |g, v| {
                let o = g.offset(v[0], 0.4);
                Ok(g.square(o))
            },
        },
        OpCase {
            name: "add",
            inputs: vec![x(rng), x(rng)],
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: vec![x(rng), x(rng)],
            build: |g, v| g.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: vec![x(rng), x(rng)],
            build: |g, v| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            inputs: vec![x(rng), uniform(rng, 1, n, -1.0, 1.0)],
            build: |g, v| {
                let s = g.add_row(v[0], v[1])?;
                Ok(g.square(s))
            },
        },
        OpCase {
            name: "concat",
            inputs: vec![x(rng), uniform(rng, b, 2, -1.0, 1.0)],
            build: |g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                Ok(g.tanh(c))
            },
        },
        OpCase {
            name: "slice_cols",
            inputs: vec![x(rng)],
            build: |g, v| {
                let s = g.slice_cols(v[0], 1, 3)?;
                Ok(g.square(s))
            },
        },
        OpCase {
            name: "sum_cols",
            inputs: vec![x(rng)],
            build: |g, v| {
                let s = g.sum_cols(v[0]);
                Ok(g.square(s))
            },
        },
        OpCase {
            name: "mean",
            inputs: vec![x(rng)],
            build: |g, v| {
                let sq = g.square(v[0]);
                Ok(g.mean(sq))
            },
        },
    ];
    // min: keep the two operands apart so the selected branch never switches
    let a = x(rng);
    let gap = away_from_zero(rng, b, n, 0.2);
    let mut bb = a.clone();
    bb.data_mut()
        .iter_mut()
        .zip(gap.data())
        .for_each(|(v, d)| *v += d);
    cases.push(OpCase {
        name: "min",
        inputs: vec![a, bb],
        build: |g, v| g.min(v[0], v[1]),
    });
    cases
}

/// Records `mean(build(inputs) ⊙ weights)`; returns the loss var and input vars.
fn record_op(
    g: &mut Graph,
    case: &OpCase,
    inputs: &[Tensor],
    weights: Option<&Tensor>,
) -> Result<(Var, Vec<Var>, Tensor)> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(g, &vars)?;
    let out_value = g.value(out).clone();
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::filled(out_value.shape(), 1.0),
    };
    let wv = g.constant(w);
    let weighted = g.mul(out, wv)?;
    Ok((g.mean(weighted), vars, out_value))
}

/// Every tape primitive, differentiated with respect to each of its inputs.
pub fn check_ops(opts: &GradCheckOptions) -> Result<Vec<GradCheck>> {
    let mut rng = substream(opts.seed, 11);
    let mut checks = Vec::new();
    for case in op_cases(&mut rng) {
        let (_, _, out) = record_op(&mut Graph::new(), &case, &case.inputs, None)?;
        let weights = uniform(&mut rng, 1, out.len(), 0.5, 1.5);
        let weights = Tensor::new(out.shape().to_vec(), weights.into_data())?;

        let mut g = opts.graph();
        let (loss, vars, _) = record_op(&mut g, &case, &case.inputs, Some(&weights))?;
        let grads = g.backward(loss)?;
        for (i, (&v, value)) in vars.iter().zip(&case.inputs).enumerate() {
            let analytic = grads.get_or_zeros(v, value.shape());
            let check = compare(
                "ops",
                format!("{} input {i}", case.name),
                value,
                &analytic,
                opts.step,
                |p| {
                    let mut inputs = case.inputs.clone();
                    inputs[i] = p.clone();
                    let mut g = Graph::new();
                    let (loss, _, _) = record_op(&mut g, &case, &inputs, Some(&weights))?;
                    g.value(loss).item()
                },
            )?;
            checks.push(check);
        }
    }
    Ok(checks)
}

/// Squared-error regression through a tanh network, per parameter tensor.
pub fn check_mlp(opts: &GradCheckOptions) -> Result<Vec<GradCheck>> {
    let mut rng = substream(opts.seed, 12);
    let net = Mlp::new(
        &[4, 6, 5, 2],
        Activation::Tanh,
        Activation::Identity,
        &mut rng,
    )?;
    let x = uniform(&mut rng, 5, 4, -1.0, 1.0);
    let y = uniform(&mut rng, 5, 2, -1.0, 1.0);
    let loss_of = |net: &Mlp| -> Result<f64> {
        let out = net.forward(&x)?;
        let n = out.len() as f64;
        Ok(out
            .data()
            .iter()
            .zip(y.data())
            .map(|(o, t)| (o - t).powi(2))
            .sum::<f64>()
            / n)
    };

    let mut g = opts.graph();
    let bound = net.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = net.forward_graph(&mut g, &bound, xv)?;
    let yv = g.constant(y.clone());
    let diff = g.sub(out, yv)?;
    let sq = g.square(diff);
    let loss = g.mean(sq);
    let grads = net.collect_grads(&g.backward(loss)?, &bound);

    let mut checks = Vec::new();
    for (idx, analytic) in grads.iter().enumerate() {
        let value = net.params()[idx].clone();
        let check = compare(
            "mlp",
            Mlp::param_name(idx),
            &value,
            analytic,
            opts.step,
            |p| {
                let mut probe = net.clone();
                *probe.params_mut()[idx] = p.clone();
                loss_of(&probe)
            },
        )?;
        checks.push(check);
    }
    Ok(checks)
}

/// Actor objective through a two-step denoising chain, per noise-network
/// parameter tensor.
pub fn check_chain(opts: &GradCheckOptions) -> Result<Vec<GradCheck>> {
    let mut rng = substream(opts.seed, 13);
    let (state_dim, action_dim) = (3, 2);
    let schedule = NoiseSchedule::new(2, 0.05, 0.2)?;
    let actor = DiffusionActor::new(
        state_dim,
        action_dim,
        &[6, 6],
        Activation::Tanh,
        schedule,
        &mut rng,
    )?;
    let critics = CriticPair::new(
        state_dim + action_dim,
        &[6],
        Activation::Tanh,
        0.5,
        &mut rng,
    )?;
    let states = uniform(&mut rng, 4, state_dim, 0.0, 1.0);
    let start = uniform(&mut rng, 4, action_dim, -1.0, 1.0);

    let loss_of = |actor: &DiffusionActor| -> Result<f64> {
        let a0 = actor.denoise::<crate::rng::SimRng>(&states, start.clone(), None)?;
        let (q1, q2) = critics.q_values(&crate::trainer::join_columns(&states, &a0)?)?;
        let n = q1.len() as f64;
        Ok(-q1
            .data()
            .iter()
            .zip(q2.data())
            .map(|(a, b)| a.min(*b))
            .sum::<f64>()
            / n)
    };

    let analytic = actor_loss_on(opts.graph(), &actor, &critics, &states, start.clone())?;
    let mut checks = Vec::new();
    for (idx, grad) in analytic.grads.iter().enumerate() {
        let value = actor.eps_net().params()[idx].clone();
        let check = compare(
            "chain",
            Mlp::param_name(idx),
            &value,
            grad,
            opts.step,
            |p| {
                let mut probe = actor.clone();
                *probe.eps_net_mut().params_mut()[idx] = p.clone();
                loss_of(&probe)
            },
        )?;
        checks.push(check);
    }
    Ok(checks)
}

/// All suites.
pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut checks = check_ops(opts)?;
    checks.extend(check_mlp(opts)?);
    checks.extend(check_chain(opts)?);
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run(&GradCheckOptions::default()).unwrap();
        println!("{report}");
        assert!(report.passed(), "{report}");
        assert!(report.checks.iter().any(|c| c.suite == "chain"));
    }

    #[test]
    fn tanh_fault_is_caught_and_named() {
        let report = run(&GradCheckOptions {
            inject_tanh_fault: true,
            ..GradCheckOptions::default()
        })
        .unwrap();
        assert!(!report.passed());
        let worst = report.worst().unwrap();
        assert!(
            worst.name.starts_with("layer") || worst.name.starts_with("tanh"),
            "{}",
            worst.name
        );
        assert!(report.to_string().contains("max relative error"));
        assert!(report
            .failures()
            .any(|c| c.suite == "chain" && c.name.starts_with("layer")));
    }
}
