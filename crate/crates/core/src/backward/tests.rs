use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::forward::{decode_model, encrypt_batch, encrypt_model, forward_pass};
use crate::geometry::{preset, CnnConfig, FcSpec};
use crate::lhe::{LheParams, Plaintext};
use crate::meter::{OpKind, OpMeter};
use crate::oracle::{plain_backward_step, random_small_config, PlainModel};
use crate::packing::{encode_fl_weights_type1, encode_fl_weights_type2, FeatureMap, SlotLayout};
use crate::plan::RMode;
use crate::tee::{label_vector, TeeHandle, TeeService};

struct Rig {
    tee: Arc<TeeService>,
    handle: TeeHandle,
    ev: Evaluator,
    meter: Arc<OpMeter>,
}

fn rig(slots: usize, levels: u32) -> Rig {
    let tee = Arc::new(TeeService::with_seed(LheParams::new(slots, levels).unwrap(), 5));
    tee.attest_and_provision("ree");
    let handle = tee.handle("ree").unwrap();
    let meter = Arc::new(OpMeter::new());
    let ev = Evaluator::new(tee.public_key(), meter.clone());
    Rig { tee, handle, ev, meter }
}

impl Rig {
    fn enc(&self, v: Vec<f64>) -> Ciphertext {
        self.ev.encrypt_slots(v).unwrap()
    }

    fn open(&self, c: &Ciphertext) -> Vec<f64> {
        self.tee.decrypt_for("ree", std::slice::from_ref(c)).unwrap().remove(0)
    }

    fn model(&self, plan: &NetworkPlan, m: &EncryptedModel) -> (PlainModel, f64) {
        let cts: Vec<Ciphertext> = m.ciphertexts().cloned().collect();
        let slots = self.tee.decrypt_for("ree", &cts).unwrap();
        decode_model(plan, m, &slots).unwrap()
    }
}

fn data(cfg: &CnnConfig, count: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ims = (0..count).map(|_| (0..cfg.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..count).map(|_| rng.random_range(0..cfg.classes())).collect();
    (ims, labels)
}

struct Round {
    report: BackwardReport,
    loss: f64,
}

fn round(
    rg: &Rig,
    plan: &NetworkPlan,
    model: &mut EncryptedModel,
    ims: &[Vec<f64>],
    labels: &[usize],
    lr: f64,
    schedule: &Schedule,
) -> Result<Round> {
    let x = encrypt_batch(&rg.ev, plan, ims)?;
    let cache = forward_pass(&rg.ev, plan, model, x)?;
    let lv = label_vector(labels, plan.cfg.n(), rg.ev.slots())?;
    let lct = rg.ev.encrypt_slots(lv.into_vec())?;
    let level = (!schedule.includes(ReencryptPoint::LossHead)).then(|| cache.logits.min_level());
    let head = rg.handle.loss_head(&cache.logits, &lct, plan.cfg.classes(), level)?;
    let report = backward_update(&rg.ev, plan, model, &cache, head.grads, &rg.handle, lr, head.batch, schedule)?;
    Ok(Round { report, loss: head.loss })
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn assert_models_close(got: &PlainModel, want: &PlainModel, tol: f64) {
    for (a, b) in got.flatten().iter().zip(want.flatten()) {
        assert!(rel_close(*a, b, tol), "{a} vs {b}");
    }
}

fn basic_plan(cfg: &CnnConfig, params: &LheParams) -> NetworkPlan {
    NetworkPlan::basic(cfg, params).unwrap()
}

#[test]
fn type1_backward_trivial() {
    let rg = rig(8, 5);
    let map = FeatureMap::contiguous(4, 4);
    let w = encode_fl_weights_type1(&rg.ev, &[1.0; 4], &FcSpec::new(4, 1), &map, 2).unwrap();
    let g = GradTensor::from_packed(PackedTensor::new(TensorLayout::Type2 { features: 1, n: 2 }, vec![rg.enc(vec![3.0; 8])]).unwrap());
    let z = PackedTensor::new(g.layout.clone(), vec![rg.enc(vec![1.0; 8])]).unwrap();
    let delta = activation_grad(&rg.ev, &g, &z).unwrap();
    let dx = fl_backward_type1(&rg.ev, &delta, &w).unwrap();
    assert_eq!(dx.tag(), "fl-type1");
    assert_eq!(rg.open(dx.cts[0].as_ref().unwrap()), vec![6.0; 8]);
    // one level for the activation derivative, one for the weights
    assert_eq!(dx.min_level(), Some(2));
}

#[test]
fn type2_backward_identity() {
    let rg = rig(8, 5);
    let w = encode_fl_weights_type2(&rg.ev, &[1.0], &FcSpec::new(1, 1), 2).unwrap();
    let layout = TensorLayout::Type1 { map: FeatureMap::contiguous(1, 4), n: 2 };
    let g = GradTensor::from_packed(PackedTensor::new(layout.clone(), vec![rg.enc(vec![2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])]).unwrap());
    let z = PackedTensor::new(layout, vec![rg.enc(vec![5.0, 7.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
    let delta = activation_grad(&rg.ev, &g, &z).unwrap();
    let dx = fl_backward_type2(&rg.ev, &delta, &w).unwrap();
    assert_eq!(dx.tag(), "fl-type2");
    assert_eq!(rg.open(dx.cts[0].as_ref().unwrap()), vec![20.0, 42.0, 20.0, 42.0, 20.0, 42.0, 20.0, 42.0]);
}

#[test]
fn weight_gradient_sums_images() {
    let rg = rig(8, 5);
    let map = FeatureMap::contiguous(4, 4);
    let w = encode_fl_weights_type1(&rg.ev, &[0.0; 4], &FcSpec::new(4, 1), &map, 2).unwrap();
    let g = GradTensor::from_packed(PackedTensor::new(TensorLayout::Type2 { features: 1, n: 2 }, vec![rg.enc(vec![2.0; 8])]).unwrap());
    let x = PackedTensor::new(TensorLayout::Type1 { map, n: 2 }, vec![rg.enc(vec![1.0, 4.0, 2.0, 3.0, 0.5, 0.5, -1.0, 1.0])]).unwrap();
    let raw = fl_weight_gradients(&rg.ev, 0, &g, &x, &w).unwrap();
    assert_eq!(raw.grads.len(), 1);
    let v = rg.open(&raw.grads[0].ct);
    // idx 0: p = 0; slot 0 of each block = g·(a1 + a2)
    assert_eq!((v[0], v[2], v[4], v[6]), (10.0, 10.0, 2.0, 0.0));

    let zero = GradTensor::from_packed(PackedTensor::new(TensorLayout::Type2 { features: 1, n: 2 }, vec![rg.enc(vec![0.0; 8])]).unwrap());
    let raw = fl_weight_gradients(&rg.ev, 0, &zero, &x, &w).unwrap();
    assert!(rg.open(&raw.grads[0].ct).iter().all(|v| *v == 0.0));
}

#[test]
fn packed_count_ceiling() {
    let rg = rig(8, 5);
    let c = rg.enc(vec![1.0; 8]);
    let raw = RawGradients {
        layer: ParamLayer::Fc(0),
        n: 4,
        grads: (0..6).map(|idx| RawGradient { param: idx, idx, blocks: 2, ct: c.clone() }).collect(),
    };
    assert_eq!(raw.packed_count(), 2);
    assert_eq!(pack_gradients(&rg.ev, &raw, 1.0).unwrap().len(), 2);
}

#[test]
fn refining_packed_counts() {
    let p = preset("refining").unwrap();
    let plan = NetworkPlan::basic(&p.cfg, &LheParams::new(p.slots, p.levels).unwrap()).unwrap();
    let counts = packed_counts(&plan);
    assert_eq!(counts, vec![(ParamLayer::Fc(1), 1), (ParamLayer::Fc(0), 1), (ParamLayer::Conv(1), 1), (ParamLayer::Conv(0), 1)]);
    assert_eq!(p.cfg.conv()[1].kernel_params(), 64);
}

#[test]
fn unpack_inverts_pack() {
    let rg = rig(16, 6);
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vals: Vec<Vec<f64>> = (0..7).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let raw = RawGradients {
        layer: ParamLayer::Conv(0),
        n,
        grads: vals.iter().enumerate().map(|(idx, v)| RawGradient { param: idx, idx, blocks: 3, ct: rg.enc(v.clone()) }).collect(),
    };
    let packed = pack_gradients(&rg.ev, &raw, 1.0).unwrap();
    let fresh = rg.handle.reencrypt_batch(&packed).unwrap();
    for (param, u) in unpack_gradients(&rg.ev, &raw, &fresh).unwrap() {
        let got = rg.open(&u);
        let p = param % n;
        for b in 0..4 {
            for j in 0..n {
                let want = if b < 3 { vals[param][b * n + p] } else { 0.0 };
                assert_eq!(got[b * n + j], want, "param {param} block {b} slot {j}");
            }
        }
    }
}

fn conv_setup(rg: &Rig, spec: ConvSpec, filter: &[f64]) -> (NetworkPlan, PackedFilters) {
    let out = spec.output_side();
    let cfg = CnnConfig::new(vec![spec], vec![FcSpec::new(spec.filters * out * out, 2)], 2).unwrap();
    let plan = basic_plan(&cfg, rg.ev.params());
    let f = crate::packing::encode_filters(&rg.ev, &spec, filter, &plan.geo).unwrap();
    (plan, f)
}

#[test]
fn conv_backward_unit_filter() {
    let rg = rig(32, 5);
    let spec = ConvSpec::new(1, 3, 1, 1, 1);
    let (plan, f) = conv_setup(&rg, spec, &[2.5]);
    let sl = SlotLayout::new(&plan.geo, 1).unwrap();
    let layout = TensorLayout::Conv { packing: ConvPacking::Basic, channels: 1, groups: 1, side: 1, slots: sl };
    let g = GradTensor::from_packed(PackedTensor::new(layout, vec![rg.enc((0..32).map(|v| v as f64).collect())]).unwrap());
    let dx = conv_backward(&rg.ev, &spec, &g, &f, 1).unwrap();
    let got = rg.open(dx.cts[0].as_ref().unwrap());
    // the filter fills the first β̃²·n = 18 slots
    for (s, v) in got.iter().enumerate() {
        assert_eq!(*v, if s < 18 { 2.5 * s as f64 } else { 0.0 });
    }
}

#[test]
fn conv_backward_overlap_counts() {
    // gamma 2, delta 1 on a grid of 3x3 outputs: input grads count contributions
    let rg = rig(8, 5);
    let spec = ConvSpec::new(1, 4, 1, 2, 1);
    let cfg = CnnConfig::new(vec![spec, ConvSpec::new(1, 3, 1, 3, 1)], vec![FcSpec::new(1, 2)], 2).unwrap();
    let plan = basic_plan(&cfg, rg.ev.params());
    assert_eq!(plan.geo.kernel_sides, vec![4, 3, 1]);
    let f = crate::packing::encode_filters(&rg.ev, &spec, &[1.0; 4], &plan.geo).unwrap();
    let sl = SlotLayout::new(&plan.geo, 1).unwrap();
    let layout = TensorLayout::Conv { packing: ConvPacking::Basic, channels: 1, groups: 1, side: 3, slots: sl };
    let g = GradTensor::from_packed(PackedTensor::new(layout, (0..9).map(|_| rg.enc(vec![1.0; 8])).collect()).unwrap());
    let dx = conv_backward(&rg.ev, &spec, &g, &f, 4).unwrap();
    let counts: Vec<f64> = dx.cts.iter().map(|c| rg.open(c.as_ref().unwrap())[0]).collect();
    assert_eq!(counts, vec![1.0, 2.0, 2.0, 1.0, 2.0, 4.0, 4.0, 2.0, 2.0, 4.0, 4.0, 2.0, 1.0, 2.0, 2.0, 1.0]);
}

#[test]
fn conv_backward_gaps_stay_empty() {
    // gamma 1, delta 2: odd positions are never touched
    let rg = rig(8, 5);
    let spec = ConvSpec::new(1, 3, 1, 1, 2);
    let cfg = CnnConfig::new(vec![spec, ConvSpec::new(1, 2, 1, 2, 1)], vec![FcSpec::new(1, 2)], 2).unwrap();
    let plan = basic_plan(&cfg, rg.ev.params());
    let f = crate::packing::encode_filters(&rg.ev, &spec, &[1.0], &plan.geo).unwrap();
    let sl = SlotLayout::new(&plan.geo, 1).unwrap();
    let side = plan.geo.kernel_sides[1];
    let layout = TensorLayout::Conv { packing: ConvPacking::Basic, channels: 1, groups: 1, side, slots: sl };
    let g = GradTensor::from_packed(PackedTensor::new(layout, (0..side * side).map(|_| rg.enc(vec![1.0; 8])).collect()).unwrap());
    let dx = conv_backward(&rg.ev, &spec, &g, &f, plan.geo.kernel_sides[0]).unwrap();
    assert_eq!(dx.present(), side * side);
    assert!(dx.cts[1].is_none());
}

#[test]
fn example_round_matches_oracle_step() {
    let p = preset("example").unwrap();
    let rg = rig(p.slots, 16);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let base = PlainModel::init(&p.cfg, 3);
    let (ims, labels) = data(&p.cfg, 2, 4);
    let mut model = encrypt_model(&rg.ev, &plan, &base).unwrap();
    let r = round(&rg, &plan, &mut model, &ims, &labels, 0.1, &Schedule::Adaptive).unwrap();
    let (want, loss) = plain_backward_step(&p.cfg, &base, &ims, &labels, 0.1).unwrap();
    assert!(rel_close(r.loss, loss, 1e-12));
    let (got, spread) = rg.model(&plan, &model);
    assert_models_close(&got, &want, 1e-8);
    assert!(spread < 1e-12, "replicas disagree by {spread}");
    // enough levels: no refresh, loss head + one pack per layer
    assert!(r.report.points.iter().all(|p| matches!(p, ReencryptPoint::Pack(_))), "{:?}", r.report.points);
    let expected: usize = packed_counts(&plan).iter().map(|c| c.1).sum();
    assert_eq!(r.report.reencryptions(), expected);
}

#[test]
fn lr_zero_is_bit_exact() {
    let p = preset("example").unwrap();
    let rg = rig(p.slots, 12);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let base = PlainModel::init(&p.cfg, 8);
    let (ims, labels) = data(&p.cfg, 2, 9);
    let mut model = encrypt_model(&rg.ev, &plan, &base).unwrap();
    let before: Vec<Vec<f64>> = model.ciphertexts().map(|c| rg.open(c)).collect();
    round(&rg, &plan, &mut model, &ims, &labels, 0.0, &Schedule::Adaptive).unwrap();
    let after: Vec<Vec<f64>> = model.ciphertexts().map(|c| rg.open(c)).collect();
    assert_eq!(before, after);
}

#[test]
fn weight_levels_settle_two_below_top() {
    let p = preset("example").unwrap();
    let rg = rig(p.slots, 10);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let mut model = encrypt_model(&rg.ev, &plan, &PlainModel::init(&p.cfg, 1)).unwrap();
    for seed in 0..3 {
        let (ims, labels) = data(&p.cfg, 2, seed);
        round(&rg, &plan, &mut model, &ims, &labels, 0.05, &Schedule::Adaptive).unwrap();
        assert!(model.ciphertexts().all(|c| c.level() == 8), "round {seed}");
    }
}

#[test]
fn round_metering_scopes() {
    let p = preset("example").unwrap();
    let rg = rig(p.slots, 12);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let mut model = encrypt_model(&rg.ev, &plan, &PlainModel::init(&p.cfg, 1)).unwrap();
    let (ims, labels) = data(&p.cfg, 2, 1);
    round(&rg, &plan, &mut model, &ims, &labels, 0.1, &Schedule::Adaptive).unwrap();
    let snap = rg.meter.snapshot();
    // FL2 is Type II with 2 outputs in one ciphertext and 2 inputs: 2 gradients
    assert_eq!(snap.scope_count("grad.FL2", OpKind::Mul), 2);
    assert_eq!(snap.scope_count("pack.FL2", OpKind::CMul), 2);
    assert_eq!(snap.scope_count("unpack.FL2", OpKind::CMul), 2);
    assert_eq!(snap.scope_count("update.FL2", OpKind::Add), 2);
    // conv kernels: aggregation over n = 2 plus a rotate-sum over 4 blocks
    let k = p.cfg.conv()[0].kernel_params() as u64;
    assert_eq!(snap.scope_count("grad.CL1", OpKind::Rot), k * 3);
}

fn deficient(points: &[ReencryptPoint], drop: usize) -> Schedule {
    let mut v = points.to_vec();
    v.remove(drop);
    Schedule::Fixed(v)
}

#[test]
fn refining_preset_needs_one_refresh() {
    let p = preset("refining").unwrap();
    let rg = rig(p.slots, p.levels);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let base = PlainModel::init(&p.cfg, 2);
    let (ims, labels) = data(&p.cfg, 8, 3);
    let mut model = encrypt_model(&rg.ev, &plan, &base).unwrap();
    let before = rg.tee.counters();
    let r = round(&rg, &plan, &mut model, &ims, &labels, 0.05, &Schedule::Adaptive).unwrap();
    let tee = rg.tee.counters().since(&before);
    assert_eq!(r.report.points.first(), Some(&ReencryptPoint::Refresh(ParamLayer::Conv(1))));
    assert_eq!(r.report.sent[0], 4);
    assert_eq!(tee.loss_head_outputs, 1);
    assert_eq!(tee.reencrypted, 4 + 4);
    let (want, _) = plain_backward_step(&p.cfg, &base, &ims, &labels, 0.05).unwrap();
    assert_models_close(&rg.model(&plan, &model).0, &want, 1e-8);

    // without the refresh the round runs out of levels
    let mut pts = vec![ReencryptPoint::LossHead];
    pts.extend(r.report.points.iter().copied());
    let mut m2 = encrypt_model(&rg.ev, &plan, &base).unwrap();
    let err = round(&rg, &plan, &mut m2, &ims, &labels, 0.05, &deficient(&pts, 1)).err().unwrap();
    assert!(err.is_level_exhausted(), "{err}");
}

#[test]
fn removing_any_point_exhausts_levels() {
    let p = preset("example").unwrap();
    let rg = rig(p.slots, 10);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let base = PlainModel::init(&p.cfg, 6);
    let (ims, labels) = data(&p.cfg, 2, 7);
    let mut model = encrypt_model(&rg.ev, &plan, &base).unwrap();
    let r = round(&rg, &plan, &mut model, &ims, &labels, 0.05, &Schedule::Adaptive).unwrap();
    // second round from steady-state levels records the per-round points
    let r = round(&rg, &plan, &mut model, &ims, &labels, 0.05, &Schedule::Adaptive).map(|r2| (r, r2)).unwrap().1;
    let mut pts = vec![ReencryptPoint::LossHead];
    pts.extend(r.report.points.iter().copied());
    for drop in 0..pts.len() {
        let mut m = encrypt_model(&rg.ev, &plan, &base).unwrap();
        let sched = deficient(&pts, drop);
        let failed = (0..2).any(|_| match round(&rg, &plan, &mut m, &ims, &labels, 0.05, &sched) {
            Ok(_) => false,
            Err(e) => {
                assert!(e.is_level_exhausted(), "{e}");
                true
            }
        });
        assert!(failed, "dropping {} did not exhaust levels", pts[drop]);
    }
    assert!(r.loss.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn random_rounds_match_oracle(seed in any::<u64>(), ni in 0usize..3) {
        let n = [2, 4, 8][ni];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cfg, slots) = random_small_config(&mut rng, n, 1);
        let rg = rig(slots, cfg.forward_depth() + 3);
        let plan = basic_plan(&cfg, rg.ev.params());
        let base = PlainModel::init(&cfg, seed);
        let (ims, labels) = data(&cfg, n, seed ^ 1);
        let mut model = encrypt_model(&rg.ev, &plan, &base).unwrap();
        round(&rg, &plan, &mut model, &ims, &labels, 0.1, &Schedule::Adaptive).unwrap();
        let (want, _) = plain_backward_step(&cfg, &base, &ims, &labels, 0.1).unwrap();
        let (got, spread) = rg.model(&plan, &model);
        prop_assert!(spread < 1e-9);
        for (a, b) in got.flatten().iter().zip(want.flatten()) {
            prop_assert!(rel_close(*a, b, 1e-8), "{} vs {}", a, b);
        }
    }
}

#[test]
fn partial_batch_uses_real_count() {
    let p = preset("example").unwrap();
    let rg = rig(p.slots, 12);
    let plan = basic_plan(&p.cfg, rg.ev.params());
    let base = PlainModel::init(&p.cfg, 3);
    let (ims, labels) = data(&p.cfg, 1, 4);
    let mut model = encrypt_model(&rg.ev, &plan, &base).unwrap();
    round(&rg, &plan, &mut model, &ims, &labels, 0.1, &Schedule::Adaptive).unwrap();
    let (want, _) = plain_backward_step(&p.cfg, &base, &ims, &labels, 0.1).unwrap();
    assert_models_close(&rg.model(&plan, &model).0, &want, 1e-8);
}

#[test]
fn cross_layout_plans_are_rejected() {
    let p = preset("cnn-2-1").unwrap();
    let rg = rig(p.slots, p.levels);
    let plan = NetworkPlan::new(&p.cfg, rg.ev.params(), RMode::Auto).unwrap();
    let mut model = encrypt_model(&rg.ev, &plan, &PlainModel::init(&p.cfg, 1)).unwrap();
    let (ims, labels) = data(&p.cfg, 1, 1);
    let err = round(&rg, &plan, &mut model, &ims, &labels, 0.1, &Schedule::Adaptive).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let _ = Plaintext::zeros(1);
}
