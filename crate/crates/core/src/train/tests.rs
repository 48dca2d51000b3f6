use super::*;
use crate::fixtures::setup;

fn quick(tc: &TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        pretrain_steps: 2,
        val_subset: 2,
        ..tc.clone()
    }
}

fn group_values(b: &ModelBundle, group: &str) -> Vec<(String, Tensor)> {
    b.store.snapshot_group(group)
}

fn same(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
}

#[test]
fn desk_schedule_values() {
    let plans = default_curriculum(Scale::Desk);
    let names: Vec<&str> = plans.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["pretrain", "stage0", "stage1", "stage2"]);
    assert_eq!(plans[0].steps, Some(2000));
    let lrs: Vec<f64> = plans[1..].iter().map(|p| p.lr).collect();
    assert_eq!(lrs, [4e-5, 1e-4, 1e-4]);
    let epochs: Vec<usize> = plans[1..].iter().map(|p| p.epochs).collect();
    assert_eq!(epochs, [2, 1, 5]);
    assert!(plans.iter().all(|p| p.batch_size == 16 && p.clip == Some(1.0)));
    assert_eq!(plans[3].weights, LossWeights { lambda_l: 1.0, lambda_v: 0.1 });
    assert!(plans[3].select_best_val);
}

#[test]
fn stage_groups_and_losses() {
    let (b, _, _) = setup(1);
    let p = curriculum(&TrainConfig::default());
    assert_eq!(p[1].frozen(&b), ["w_l", "w_v", "dec_l", "dec_v", "head"]);
    assert_eq!(p[2].frozen(&b), ["backbone", "patch", "head"]);
    assert_eq!(p[2].losses, [LossKind::Lang, LossKind::Vis]);
    assert_eq!(p[3].frozen(&b), ["head"]);
    for plan in &p {
        plan.validate(&b).unwrap();
    }
}

#[test]
fn variants_drop_what_they_ablate() {
    let tc = TrainConfig::default();
    let nv = variant_plans(Variant::NoVis, &tc);
    assert!(nv.iter().all(|p| p.kind != StageKind::Pretrain && !p.has(LossKind::Vis)));
    assert!(nv.iter().all(|p| !p.trainable.iter().any(|g| g == "dec_v" || g == "w_v")));
    let nl = variant_plans(Variant::NoLang, &tc);
    assert!(nl.iter().all(|p| !p.has(LossKind::Lang)));
    let ns = variant_plans(Variant::NoStaging, &tc);
    assert_eq!(ns.len(), 1);
    assert_eq!(ns[0].clip, None);
    let fl = variant_plans(Variant::FrozenLatent, &tc);
    assert!(fl.iter().all(|p| !p.trainable.iter().any(|g| g == "backbone" || g == "patch")));
    let ao = variant_plans(Variant::AnswerOnly, &tc);
    assert!(ao.iter().all(|p| p.layout == LayoutKind::AnswerOnly));
    let ec = variant_plans(Variant::ExplicitCot, &tc);
    assert!(ec.iter().all(|p| p.layout == LayoutKind::ExplicitCot && p.losses == [LossKind::Main]));
    assert_eq!(ec.iter().map(|p| p.epochs).collect::<Vec<_>>(), ao.iter().map(|p| p.epochs).collect::<Vec<_>>());
    assert_eq!(variant_plans(Variant::MlpHead, &tc).last().unwrap().kind, StageKind::Head);
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("nope".parse::<Variant>().is_err());
}

#[test]
fn invalid_plans_are_rejected() {
    let mut b = ModelBundle::new(ModelConfig {
        mlp_head: false,
        ..crate::fixtures::tiny_config()
    })
    .unwrap();
    let tc = TrainConfig::default();
    assert!(plan_for(StageKind::Head, &tc).validate(&b).is_err());
    let mut p = plan_for(StageKind::Stage0, &tc);
    p.trainable.push("nonexistent".into());
    assert!(p.validate(&b).is_err());
    let mut p = plan_for(StageKind::Stage0, &tc);
    p.losses.clear();
    assert!(p.validate(&b).is_err());
    let mut p = plan_for(StageKind::Pretrain, &tc);
    p.losses.push(LossKind::Main);
    assert!(p.validate(&b).is_err());
    let mut p = plan_for(StageKind::ExplicitCot, &tc);
    p.losses.push(LossKind::Lang);
    assert!(p.validate(&b).is_err());
    b.store.train_only(&[]);
}

use crate::model::ModelConfig;

#[test]
fn frozen_groups_stay_bit_identical() {
    let (mut b, v, s) = setup(4);
    let tc = quick(&TrainConfig::smoke());
    let data = TrainData { vocab: &v, train: &s, val: &s[..2] };
    let mut state = TrainState::new(0, 2);
    let init_dec = [group_values(&b, "dec_l"), group_values(&b, "dec_v")];
    run_stage(&mut b, &plan_for(StageKind::Stage0, &tc), &data, &mut state).unwrap();
    assert!(same(&init_dec[0], &group_values(&b, "dec_l")));
    assert!(same(&init_dec[1], &group_values(&b, "dec_v")));
    let main = [group_values(&b, "backbone"), group_values(&b, "patch")];
    run_stage(&mut b, &plan_for(StageKind::Stage1, &tc), &data, &mut state).unwrap();
    assert!(same(&main[0], &group_values(&b, "backbone")));
    assert!(same(&main[1], &group_values(&b, "patch")));
    assert!(!same(&init_dec[0], &group_values(&b, "dec_l")));
    // Moments exist only for this stage's trainable parameters.
    let allowed = ["w_l", "w_v", "dec_l", "dec_v"];
    assert!(state.optimizer.tracked().count() > 0);
    assert!(state.optimizer.tracked().all(|id| allowed.contains(&b.store.group(id))));
}

#[test]
fn curriculum_trains_every_group_but_head() {
    let (b, _, _) = setup(1);
    let tc = TrainConfig::default();
    let touched = |plans: &[StagePlan]| -> std::collections::BTreeSet<String> { plans.iter().flat_map(|p| p.trainable.iter().cloned()).collect() };
    let all: std::collections::BTreeSet<String> = b.store.groups().into_iter().collect();
    let mut expect = all.clone();
    expect.remove("head");
    assert_eq!(touched(&curriculum(&tc)), expect);
    assert_eq!(touched(&variant_plans(Variant::MlpHead, &tc)), all);
}

fn gradient_groups(b: &ModelBundle, grads: &[(ParamId, Tensor)]) -> std::collections::BTreeSet<String> {
    grads.iter().filter(|(_, t)| t.data().iter().any(|&x| x != 0.0)).map(|(id, _)| b.store.group(*id).to_string()).collect()
}

#[test]
fn inactive_losses_send_no_gradient_to_their_parameters() {
    let (mut b, v, s) = setup(2);
    b.store.train_only(&["backbone", "patch", "w_l", "w_v", "dec_l", "dec_v", "head"]);
    let batch: Vec<&EncodedSample> = s.iter().collect();
    let cases: [(&[LossKind], &[&str], &[&str]); 3] = [
        (&[LossKind::Main], &["backbone", "patch"], &["w_l", "w_v", "dec_l", "dec_v", "head"]),
        (&[LossKind::Lang], &["w_l", "dec_l"], &["w_v", "dec_v", "head"]),
        (&[LossKind::Vis], &["w_v", "dec_v"], &["w_l", "dec_l", "head"]),
    ];
    for (losses, live, dead) in cases {
        let mut plan = plan_for(StageKind::Stage2, &TrainConfig::default());
        plan.losses = losses.to_vec();
        plan.trainable = b.store.groups();
        let (_, grads) = batch_gradients(&b, &plan, &v, &batch).unwrap();
        let got = gradient_groups(&b, &grads);
        for g in live {
            assert!(got.contains(*g), "{losses:?}: no gradient on {g}");
        }
        for g in dead {
            assert!(!got.contains(*g), "{losses:?}: stray gradient on {g}");
        }
    }
}

#[test]
fn stage_total_is_weighted_sum() {
    let (b, v, s) = setup(3);
    let plan = plan_for(StageKind::Stage2, &TrainConfig::default());
    for x in &s {
        let mut g = Graph::new();
        let (_, c) = sample_loss(&mut g, &b, &plan, &v, x).unwrap();
        let expect = c.l_c.unwrap() + 1.0 * c.l_l.unwrap() + 0.1 * c.l_v.unwrap();
        assert!((c.total - expect).abs() < 1e-10, "{} vs {expect}", c.total);
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let (mut b, v, s) = setup(3);
    let plan = plan_for(StageKind::Stage0, &TrainConfig::default());
    b.store.train_only(&["backbone", "patch"]);
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let (comp, grads) = batch_gradients(&b, &plan, &v, &refs).unwrap();
    let mut mean_loss = 0.0;
    let mut first = None;
    for x in &s {
        let mut g = Graph::new();
        let (l, c) = sample_loss(&mut g, &b, &plan, &v, x).unwrap();
        mean_loss += c.total / 3.0;
        let gr = g.backward(l).unwrap().into_param_grads();
        let t = gr[0].1.data()[0] / 3.0;
        first = Some(first.unwrap_or(0.0) + t);
    }
    assert!((comp.total - mean_loss).abs() < 1e-12);
    assert!((grads[0].1.data()[0] - first.unwrap()).abs() < 1e-12);
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let (mut b, v, s) = setup(2);
    let mut plan = plan_for(StageKind::Stage0, &TrainConfig::default());
    plan.lr = 3e-3;
    plan.batch_size = 2;
    plan.epochs = 40;
    plan.warmup_frac = 0.0;
    let data = TrainData { vocab: &v, train: &s, val: &[] };
    let mut state = TrainState::new(1, 0);
    run_stage(&mut b, &plan, &data, &mut state).unwrap();
    let losses: Vec<f64> = state.steps().map(|r| r.losses.total).collect();
    assert_eq!(losses.len(), 40);
    assert!(losses[39] < 0.8 * losses[0], "{} -> {}", losses[0], losses[39]);
}

#[test]
fn non_finite_loss_names_the_stage() {
    let (mut b, v, s) = setup(2);
    let id = b.store.group_ids("patch")[0];
    b.store.value_mut(id).data_mut()[0] = f64::NAN;
    let plan = plan_for(StageKind::Stage0, &quick(&TrainConfig::smoke()));
    let data = TrainData { vocab: &v, train: &s, val: &[] };
    let err = run_stage(&mut b, &plan, &data, &mut TrainState::new(0, 0)).unwrap_err();
    match err {
        Error::NonFiniteLoss { stage, step } => {
            assert_eq!(stage, "stage0");
            assert_eq!(step, 0);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn pipeline_is_deterministic_and_writes_artifacts() {
    let (b, v, s) = setup(5);
    let tc = quick(&TrainConfig::smoke());
    let mut job = PipelineJob::new(Variant::MlpHead, &tc, "h");
    let data = TrainData { vocab: &v, train: &s[..4], val: &s[4..] };
    let dir = tempfile::tempdir().unwrap();
    let c = run_full_pipeline(b.clone(), &data, &job, None).unwrap();
    job.out_dir = Some(dir.path().to_path_buf());
    let a = run_full_pipeline(b, &data, &job, None).unwrap();
    assert_eq!(a.report, c.report);
    assert!(a.bundle.store.ids().all(|id| a.bundle.store.value(id).bit_eq(c.bundle.store.value(id))));
    let names: Vec<String> = a.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["pretrain.ckpt", "stage0.ckpt", "stage1.ckpt", "stage2.ckpt", "head.ckpt"]);
    let back = ModelBundle::load(&a.checkpoints[4]).unwrap();
    assert_eq!(back.meta["stage"], "head");
    assert_eq!(back.meta["config_hash"], "h");
    let lines: Vec<ReportLine> = crate::jsonl::read_jsonl(&dir.path().join("report.jsonl")).unwrap();
    assert_eq!(lines, a.report);
    let stages = lines.iter().filter(|l| matches!(l, ReportLine::Stage(_))).count();
    assert_eq!(stages, 5);
}
