//! Oracles shared by the integration tests and the acceptance run: the
//! finite-difference gradient suite and brute-force AP.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use strobe_core::geometry::{ClassId, LidarPoint, Pose2, Timestamp};
use strobe_core::net::{self, MemoryVars, NetConfig, Params, SpatialMemory, Weights};
use strobe_core::sim::Label;
use strobe_core::tensor::gradcheck::{grad_check, grad_check_elements, project, rel_err, GradReport};
use strobe_core::tensor::{Scalar, Tape, Tensor, Var};
use strobe_core::train::{unrolled_loss, SupervisedPacket, TrainConfig};

pub fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}

/// Values bounded away from zero so ReLU kinks are not straddled.
fn off_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Distinct, well-separated values so max-pool winners are stable.
fn separated<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape.to_vec(), v.into_iter().map(T::of).collect()).unwrap()
}

pub struct OpCheck {
    pub name: &'static str,
    pub report: GradReport,
    /// Analytic input gradients, widened to f64.
    pub grads: Vec<Tensor<f64>>,
}

/// Checks one operator: `op` maps tape inputs to an output which is reduced
/// with a fixed random projection.
fn check_op<T: Scalar>(
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    h: f64,
    op: impl Fn(&mut Tape<T>, &[Var]) -> strobe_core::Result<Var>,
) -> OpCheck {
    let shape = {
        let mut tape = Tape::forward_only();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = op(&mut tape, &vars).unwrap();
        tape.value(y).shape().to_vec()
    };
    let r: Tensor<T> = random(&mut ChaCha8Rng::seed_from_u64(99), &shape);
    let f = |tape: &mut Tape<T>, v: &[Var]| {
        let y = op(tape, v)?;
        project(tape, y, &r)
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = vars.iter().zip(&inputs).map(|(v, t)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())).cast()).collect();
    OpCheck { name, report: grad_check(f, &inputs, h).unwrap(), grads }
}

/// Gradient checks of every tape operator. Inputs are drawn in f64 and
/// rounded to `T`.
pub fn op_checks<T: Scalar>(h: f64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = &mut rng;
    let affine = [[0.98, -0.2, 0.7], [0.2, 0.98, -0.4]];
    let x = random::<T>(g, &[2, 6, 6]);
    let (w, b) = (random::<T>(g, &[3, 2, 3, 3]), random::<T>(g, &[3]));
    let relu_in = off_zero::<T>(g, &[2, 4, 4]);
    let gn = vec![random::<T>(g, &[4, 3, 3]), random::<T>(g, &[4]), random::<T>(g, &[4])];
    let pool_in = separated::<T>(g, &[2, 4, 6]);
    let (resize_in, warp_in) = (random::<T>(g, &[2, 3, 4]), random::<T>(g, &[2, 5, 5]));
    let (a, c, d) = (random::<T>(g, &[2, 3, 3]), random::<T>(g, &[1, 3, 3]), random::<T>(g, &[2, 3, 3]));
    let (wide, big) = (random::<T>(g, &[4, 3, 3]), random::<T>(g, &[2, 5, 5]));
    let (base, patch) = (random::<T>(g, &[2, 5, 5]), random::<T>(g, &[2, 2, 3]));
    vec![
        check_op("conv2d", vec![x.clone(), w.clone(), b.clone()], h, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        check_op("conv2d_stride2", vec![x, w, b], h, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 0, 2)),
        check_op("relu", vec![relu_in], h, |t, v| Ok(t.relu(v[0]))),
        check_op("group_norm", gn, h, |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5)),
        check_op("max_pool2", vec![pool_in], h, |t, v| t.max_pool2(v[0])),
        check_op("resize", vec![resize_in], h, |t, v| t.resize(v[0], 5, 7)),
        check_op("warp", vec![warp_in], h, move |t, v| Ok(t.warp(v[0], affine))),
        check_op("concat", vec![a.clone(), c], h, |t, v| t.concat(&[v[0], v[1]])),
        check_op("slice_channels", vec![wide], h, |t, v| Ok(t.slice_channels(v[0], 1, 3))),
        check_op("crop", vec![big], h, |t, v| Ok(t.crop(v[0], -1, 2, 4, 4))),
        check_op("paste", vec![base, patch], h, |t, v| t.paste(v[0], v[1], 2, 1)),
        check_op("add", vec![a.clone(), d], h, |t, v| t.add(v[0], v[1])),
        check_op("scale", vec![a.clone()], h, |t, v| Ok(t.scale(v[0], T::of(-1.5)))),
        check_op("sum", vec![a], h, |t, v| Ok(t.sum(v[0]))),
    ]
}

/// Worst relative error of f32 analytic gradients against the f64 ones.
pub fn f32_shadow_error(f32_checks: &[OpCheck], f64_checks: &[OpCheck]) -> Vec<(&'static str, f64)> {
    f32_checks
        .iter()
        .zip(f64_checks)
        .map(|(a, b)| {
            let worst = a
                .grads
                .iter()
                .zip(&b.grads)
                .flat_map(|(ga, gb)| ga.data().iter().zip(gb.data()).map(|(&x, &y)| rel_err(x, y)))
                .fold(0.0, f64::max);
            (a.name, worst)
        })
        .collect()
}

/// Three supervised packets on a small grid, poses drifting so memory is
/// realigned between steps. The last packet has no hits on the labelled
/// actors.
pub fn bptt_packets(cfg: &NetConfig) -> Vec<SupervisedPacket<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = vec![
        Label { actor_id: 1, class: ClassId::Vehicle, pose: Pose2::new(0.6, -0.4, 0.3), length: 4.5, width: 1.9 },
        Label { actor_id: 2, class: ClassId::Pedestrian, pose: Pose2::new(-1.8, 1.5, 0.0), length: 0.8, width: 0.8 },
    ];
    (0..3)
        .map(|k| {
            let pose = Pose2::new(0.15 * k as f64, 0.05 * k as f64, 0.02 * k as f64);
            let points: Vec<LidarPoint> = (0..60)
                .map(|_| LidarPoint {
                    x: rng.gen_range(-2.5..2.5),
                    y: rng.gen_range(-2.5..2.5),
                    z: rng.gen_range(-0.4..2.0),
                    t: Timestamp::from_micros(k * 10_000),
                })
                .collect();
            let mut input = net::prepare_input(cfg, &points, pose, None).cast();
            input.map = Tensor::from_fn(input.map.shape(), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            SupervisedPacket {
                input,
                labels: labels.clone(),
                hit_ids: if k < 2 { vec![1, 2] } else { vec![] },
            }
        })
        .collect()
}

/// Initial weights with biases and norm affines jittered off their constant
/// init, so no ReLU sits exactly at its kink on empty input cells.
pub fn bptt_weights(cfg: &NetConfig) -> (Vec<String>, Vec<Tensor<f64>>) {
    let weights: Weights<f64> = Weights::init(cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = weights.names().map(str::to_string).collect();
    let inputs = names
        .iter()
        .map(|n| {
            let mut t = (**weights.get(n).unwrap()).clone();
            if !n.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
            }
            t
        })
        .collect();
    (names, inputs)
}

/// Gradient of the summed loss over a three-packet unroll with respect to
/// the weights, checked on `per_tensor` random elements of every tensor.
pub fn bptt_report(cfg: &NetConfig, per_tensor: usize, h: f64) -> GradReport {
    let (names, inputs) = bptt_weights(cfg);
    let packets = bptt_packets(cfg);
    let train_cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let elements: Vec<Vec<usize>> =
        inputs.iter().map(|t| (0..per_tensor.min(t.len())).map(|_| rng.gen_range(0..t.len())).collect()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let params = Params::from_vars(names.iter().map(String::as_str).zip(vars.iter().copied()));
        let mem = SpatialMemory::zeros(cfg, Pose2::IDENTITY);
        let mv = MemoryVars::constant(tape, &mem);
        // fixed mining draws so every evaluation sees the same negatives
        let mut mining = ChaCha8Rng::seed_from_u64(1);
        let (loss, _, _) = unrolled_loss(tape, &params, cfg, &train_cfg, mv, &packets, Default::default(), &mut mining)?;
        Ok(loss.expect("packets have points"))
    };
    grad_check_elements(f, &inputs, h, &elements).unwrap()
}

/// Brute-force PR enumeration: one operating point per distinct score
/// threshold, counted from scratch; interpolated precision at each recall
/// step is the best precision reaching at least that recall.
pub fn brute_force_ap(flags: &[(f64, bool)], label_count: usize) -> f64 {
    if label_count == 0 {
        return f64::NAN;
    }
    let mut thresholds: Vec<f64> = flags.iter().map(|f| f.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let curve: Vec<(usize, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<_> = flags.iter().filter(|f| f.0 >= t).collect();
            let tp = kept.iter().filter(|f| f.1).count();
            (tp, tp as f64 / kept.len() as f64)
        })
        .collect();
    let total = curve.last().map_or(0, |c| c.0);
    let mut area = 0.0;
    for k in 1..=total {
        area += curve.iter().filter(|c| c.0 >= k).map(|c| c.1).fold(0.0, f64::max);
    }
    area / label_count as f64
}

/// Random AP instance with at most 20 detections. Half the instances draw
/// scores from ten levels so ties are common.
pub fn ap_instance(rng: &mut ChaCha8Rng) -> (Vec<(f64, bool)>, usize) {
    let n = rng.gen_range(0..=20);
    let coarse = rng.gen_bool(0.5);
    let flags: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let s = if coarse { rng.gen_range(1..=10) as f64 / 10.0 } else { rng.gen_range(0.0..1.0) };
            (s, rng.gen_bool(0.5))
        })
        .collect();
    let tp = flags.iter().filter(|f| f.1).count();
    (flags, tp + rng.gen_range(0..4))
}

/// Instances out of `count` where `average_precision` and the brute-force
/// oracle differ in any bit.
pub fn ap_mismatches(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .filter(|_| {
            let (flags, labels) = ap_instance(&mut rng);
            strobe_core::eval::ap::average_precision(&flags, labels).to_bits() != brute_force_ap(&flags, labels).to_bits()
        })
        .count()
}
