#![allow(dead_code)]

use std::hash::{Hash, Hasher};

use attcap::autodiff::{CellRect, Primitive, Tape, Tensor, Var};
use attcap::data::STOP;
use attcap::decode::{StepDist, StepModel};
use attcap::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values spread over [-2, 2] with pairwise gaps well above the finite
/// difference step, so max-style ops have no near-ties.
pub fn spaced(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    levels.shuffle(rng);
    let data = levels
        .into_iter()
        .map(|l| -2.0 + 4.0 * (l as f64 + 0.5) / n as f64 + rng.gen_range(-0.1..0.1) / n as f64)
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Values in [-2, 2] kept at least 0.1 away from zero (relu kink).
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights, so the check
/// exercises every output coordinate (plain `sum` would hide softmax errors).
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = uniform(&mut rng(seed ^ 0xabcdef), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(x, wv)?;
    tape.sum(prod)
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: Primitive,
}

fn dim(rng: &mut impl Rng) -> usize {
    rng.gen_range(1..=4)
}

/// One random instance of every primitive.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut r = rng(seed);
    let (m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let mut cases = Vec::new();
    let mut push = |name, op, inputs| cases.push(PrimitiveCase { name, inputs, op });

    push(
        "matmul",
        Primitive::MatMul,
        vec![
            uniform(&mut r, &[m, k], -2.0, 2.0),
            uniform(&mut r, &[k, n], -2.0, 2.0),
        ],
    );
    push(
        "matmul_mv",
        Primitive::MatMul,
        vec![
            uniform(&mut r, &[m, k], -2.0, 2.0),
            uniform(&mut r, &[k], -2.0, 2.0),
        ],
    );
    push(
        "matmul_vm",
        Primitive::MatMul,
        vec![
            uniform(&mut r, &[k], -2.0, 2.0),
            uniform(&mut r, &[k, n], -2.0, 2.0),
        ],
    );
    push(
        "transpose",
        Primitive::Transpose,
        vec![uniform(&mut r, &[m, n], -2.0, 2.0)],
    );
    for (name, op) in [
        ("add", Primitive::Add),
        ("sub", Primitive::Sub),
        ("mul", Primitive::Mul),
    ] {
        push(
            name,
            op,
            vec![
                uniform(&mut r, &[m, n], -2.0, 2.0),
                uniform(&mut r, &[m, n], -2.0, 2.0),
            ],
        );
    }
    push(
        "affine",
        Primitive::Affine {
            scale: -1.5,
            shift: 0.7,
        },
        vec![uniform(&mut r, &[m, n], -2.0, 2.0)],
    );
    push(
        "add_bias",
        Primitive::AddBias,
        vec![
            uniform(&mut r, &[m, n], -2.0, 2.0),
            uniform(&mut r, &[n], -2.0, 2.0),
        ],
    );
    push(
        "outer_sum",
        Primitive::OuterSum,
        vec![
            uniform(&mut r, &[m], -2.0, 2.0),
            uniform(&mut r, &[n], -2.0, 2.0),
        ],
    );
    for (name, op) in [
        ("sigmoid", Primitive::Sigmoid),
        ("tanh", Primitive::Tanh),
        ("exp", Primitive::Exp),
        ("softmax", Primitive::Softmax),
        ("log_softmax", Primitive::LogSoftmax),
        ("sum", Primitive::Sum),
    ] {
        push(name, op, vec![uniform(&mut r, &[m, n], -2.0, 2.0)]);
    }
    push(
        "log",
        Primitive::Log,
        vec![uniform(&mut r, &[m, n], 0.3, 2.0)],
    );
    push(
        "relu",
        Primitive::Relu,
        vec![away_from_zero(&mut r, &[m, n])],
    );
    for axis in 0..2 {
        push(
            "logsumexp",
            Primitive::LogSumExp { axis },
            vec![uniform(&mut r, &[m, n], -2.0, 2.0)],
        );
        push(
            "sum_axis",
            Primitive::SumAxis { axis },
            vec![uniform(&mut r, &[m, n], -2.0, 2.0)],
        );
        push(
            "max_axis",
            Primitive::MaxAxis { axis },
            vec![spaced(&mut r, &[m, n])],
        );
    }
    push(
        "concat",
        Primitive::Concat,
        vec![
            uniform(&mut r, &[m, n], -2.0, 2.0),
            uniform(&mut r, &[k, n], -2.0, 2.0),
            uniform(&mut r, &[1, n], -2.0, 2.0),
        ],
    );
    let rows = m + 1;
    let indices: Vec<usize> = (0..k + 1).map(|_| r.gen_range(0..rows)).collect();
    push(
        "gather_rows",
        Primitive::GatherRows { indices },
        vec![uniform(&mut r, &[rows, n], -2.0, 2.0)],
    );
    push(
        "reshape",
        Primitive::Reshape { shape: vec![n, m] },
        vec![uniform(&mut r, &[m, n], -2.0, 2.0)],
    );

    let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
    let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=1);
    push(
        "conv2d",
        Primitive::Conv2d { stride, padding },
        vec![
            uniform(&mut r, &[h, w, cin], -2.0, 2.0),
            uniform(&mut r, &[3, 3, cin, cout], -1.0, 1.0),
        ],
    );
    let rects: Vec<CellRect> = (0..3)
        .map(|_| {
            let r0 = r.gen_range(0..h);
            let c0 = r.gen_range(0..w);
            CellRect {
                r0,
                r1: r.gen_range(r0 + 1..=h),
                c0,
                c1: r.gen_range(c0 + 1..=w),
            }
        })
        .collect();
    push(
        "max_pool_rect",
        Primitive::MaxPoolRect { rects },
        vec![spaced(&mut r, &[h, w, cin])],
    );

    // points away from cell boundaries; some deliberately off-map (clamped)
    let npts = r.gen_range(2..=5);
    let mut pts = Vec::new();
    for p in 0..npts {
        for extent in [h, w] {
            let v = if p == 0 && r.gen_bool(0.5) {
                if r.gen_bool(0.5) {
                    -1.5
                } else {
                    extent as f64 + 0.3
                }
            } else {
                r.gen_range(0..extent - 1) as f64 + r.gen_range(0.05..0.95)
            };
            pts.push(v);
        }
    }
    push(
        "bilinear_sample",
        Primitive::BilinearSample,
        vec![
            uniform(&mut r, &[h, w, cin], -2.0, 2.0),
            Tensor::new(&[npts, 2], pts).unwrap(),
        ],
    );
    let centers: Vec<(f64, f64)> = (0..m).map(|i| (i as f64, (i * 2) as f64)).collect();
    let lattice = vec![(-1.0, -1.0), (0.0, 1.0), (1.0, 0.0)];
    push(
        "affine_grid",
        Primitive::AffineGrid { centers, lattice },
        vec![uniform(&mut r, &[m, 6], -2.0, 2.0)],
    );
    cases
}

pub fn check_case(case: &PrimitiveCase, seed: u64, eps: f64, tol: f64) -> Result<f64> {
    let op = case.op.clone();
    let report = attcap::autodiff::grad_check(
        |tape, vars| {
            let out = tape.apply(op.clone(), vars)?;
            weighted_sum(tape, out, seed)
        },
        &case.inputs,
        eps,
        tol,
    )?;
    Ok(report.max_rel_error)
}

/// Word model whose log-probabilities are a fixed random function of the
/// emitted prefix.
pub struct PrefixTable {
    pub words: usize,
    pub seed: u64,
    pub uniform: bool,
}

impl PrefixTable {
    pub fn logits(&self, prefix: &[usize]) -> Vec<f64> {
        if self.uniform {
            return vec![0.0; self.words];
        }
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut r = rng(h.finish());
        (0..self.words).map(|_| r.gen_range(-2.0..2.0)).collect()
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl StepModel for PrefixTable {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, state: &Vec<usize>) -> Result<StepDist> {
        Ok(StepDist {
            log_probs: log_softmax(&self.logits(state)),
            regions: None,
            scores: None,
        })
    }

    fn advance(&self, state: &Vec<usize>, _: &StepDist, token: usize) -> Result<Vec<usize>> {
        let mut s = state.clone();
        s.push(token);
        Ok(s)
    }
}

/// Best sequence by enumeration: every STOP-terminated prefix plus every
/// sequence of exactly `max_len` tokens.
pub fn exhaustive(m: &PrefixTable, max_len: usize) -> (Vec<usize>, f64) {
    fn go(
        m: &PrefixTable,
        prefix: &mut Vec<usize>,
        lp: f64,
        max_len: usize,
        best: &mut (Vec<usize>, f64),
    ) {
        let dist = log_softmax(&m.logits(prefix));
        for (w, l) in dist.iter().enumerate() {
            prefix.push(w);
            let total = lp + l;
            if w == STOP || prefix.len() == max_len {
                if total > best.1 {
                    *best = (prefix.clone(), total);
                }
            } else {
                go(m, prefix, total, max_len, best);
            }
            prefix.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    go(m, &mut Vec::new(), 0.0, max_len, &mut best);
    best
}
