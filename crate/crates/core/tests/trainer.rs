use segpre::data::plan::build_plan_with;
use segpre::data::synth::synth_dataset_with;
use segpre::data::{make_few_shot_split, Domain, ImageSample, SynthConfig};
use segpre::model::params::digest_values;
use segpre::model::{Detector, DetectorParams, Group, ModelConfig};
use segpre::moco::MoCoState;
use segpre::trainer::{
    amt2_run, coco_pretrain, finetune, finetune_on, initial_params, pre_finetune, run_arm, Arm, ArmData, Phase,
    TrainConfig, TrainEvent,
};

fn small(domain: Domain, n: usize, seed: u64) -> Vec<ImageSample> {
    synth_dataset_with(domain, n, seed, SynthConfig { height: 32, width: 32 }).unwrap()
}

fn det() -> Detector {
    Detector::new(ModelConfig::default()).unwrap().0
}

fn quick_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    c.pretrain.coco_pretrain_epochs = 1;
    c.pretrain.batch_size = 2;
    c.amt2.amt2_iterations = 2;
    c.amt2.moco_steps_per_iter = 1;
    c.amt2.moco_batch_size = 2;
    c.amt2.adaption_steps_per_iter = 1;
    c.amt2.adaption_batch_size = 2;
    c.moco.queue_size = 16;
    c.finetune.steps = 2;
    c
}

fn tags(events: &[TrainEvent]) -> Vec<Phase> {
    events.iter().map(|e| e.phase).collect()
}

fn plan_for(coco: &[ImageSample], cells: &[ImageSample], config: &TrainConfig) -> segpre::data::Amt2Plan {
    let c: Vec<String> = coco.iter().map(|s| s.id.clone()).collect();
    let k: Vec<String> = cells.iter().map(|s| s.id.clone()).collect();
    build_plan_with(&c, &k, config.seed, config.amt2.amt2_iterations).unwrap()
}

#[test]
fn pretrain_step_count() {
    let d = det();
    let data = small(Domain::NaturalLike, 8, 1);
    let mut config = quick_config(0);
    config.pretrain.coco_pretrain_epochs = 4;
    config.pretrain.batch_size = 2;
    let mut p = initial_params(&d, 0);
    let ev = coco_pretrain(&d, &mut p, &data, &config).unwrap();
    assert_eq!(ev.len(), 16);
    assert!(ev.iter().enumerate().all(|(i, e)| e.step == i && e.phase == Phase::CocoPretrain));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let d = det();
    let data = small(Domain::NaturalLike, 4, 1);
    let mut config = quick_config(0);
    config.pretrain.coco_pretrain_epochs = 0;
    let mut p = initial_params(&d, 0);
    let before = p.clone();
    assert!(coco_pretrain(&d, &mut p, &data, &config).unwrap().is_empty());
    assert_eq!(p.digest(), before.digest());
    assert!(coco_pretrain(&d, &mut p, &[], &config).is_err());
}

#[test]
fn pretrain_loss_goes_down_for_most_seeds() {
    let d = det();
    let mut improved = 0;
    for seed in 0..5 {
        let data = synth_dataset_with(Domain::NaturalLike, 10, seed, SynthConfig::default()).unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut p = initial_params(&d, seed);
        let ev = coco_pretrain(&d, &mut p, &data, &config).unwrap();
        let epochs = config.pretrain.coco_pretrain_epochs;
        let mean = |e: usize| {
            let v: Vec<f64> = ev.iter().filter(|x| x.iter == e).map(|x| x.losses.total).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        if mean(epochs - 1) < mean(0) {
            improved += 1;
        }
    }
    assert!(improved >= 4, "only {improved} of 5 seeds improved");
}

#[test]
fn amt2_schedule_tags() {
    let d = det();
    let coco = small(Domain::NaturalLike, 10, 2);
    let cells = small(Domain::CellLike, 4, 3);
    let config = quick_config(0);
    let mut p = initial_params(&d, 0);
    let mut moco = None;
    let ev = amt2_run(&d, &mut p, &plan_for(&coco, &cells, &config), &cells, &coco, &config, &mut moco).unwrap();
    use Phase::*;
    assert_eq!(tags(&ev), vec![Moco, AnchorSnapshot, Adaption, Moco, AnchorSnapshot, Adaption]);
    assert_eq!(ev.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);

    let mut wrong = config.clone();
    wrong.amt2.amt2_iterations = 3;
    let mut moco = None;
    assert!(amt2_run(&d, &mut p, &plan_for(&coco, &cells, &config), &cells, &coco, &wrong, &mut moco).is_err());
}

fn longer_amt2(config: &mut TrainConfig) {
    config.amt2.moco_steps_per_iter = 3;
    config.amt2.adaption_steps_per_iter = 3;
}

#[test]
fn amt2_ordering_and_anchor_freshness() {
    let d = det();
    let coco = small(Domain::NaturalLike, 10, 2);
    let cells = small(Domain::CellLike, 4, 3);
    let mut config = quick_config(1);
    longer_amt2(&mut config);
    let mut p = initial_params(&d, 1);
    let mut moco = None;
    let ev = amt2_run(&d, &mut p, &plan_for(&coco, &cells, &config), &cells, &coco, &config, &mut moco).unwrap();

    let mut last_iter = 0;
    let mut stage = 0; // 0 moco, 1 snapshot, 2 adaption
    let mut anchor: Option<String> = None;
    let mut last_moco_digest: Option<String> = None;
    for e in &ev {
        if e.iter != last_iter {
            assert_eq!(e.iter, last_iter + 1);
            assert_eq!(stage, 2);
            last_iter = e.iter;
            stage = 0;
        }
        match e.phase {
            Phase::Moco => {
                assert_eq!(stage, 0);
                last_moco_digest = e.digest.clone();
            }
            Phase::AnchorSnapshot => {
                assert_eq!(stage, 0);
                stage = 1;
                // Nothing touches the backbone between the last MoCo step and the snapshot.
                assert_eq!(e.digest, last_moco_digest);
                anchor = e.digest.clone();
            }
            Phase::Adaption => {
                assert!(stage >= 1);
                stage = 2;
                assert_eq!(e.anchor_digest, anchor);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(last_iter, 1);
    // Distinct anchors per iteration: MoCo moved the backbone in between.
    let anchors: Vec<&String> = ev.iter().filter(|e| e.phase == Phase::AnchorSnapshot).filter_map(|e| e.digest.as_ref()).collect();
    assert_ne!(anchors[0], anchors[1]);
}

fn final_anchor_distance(alpha: f64) -> f64 {
    let d = det();
    let coco = small(Domain::NaturalLike, 10, 2);
    let cells = small(Domain::CellLike, 4, 3);
    let mut config = quick_config(4);
    config.amt2.amt2_iterations = 1;
    config.amt2.adaption_steps_per_iter = 5;
    config.amt2.alpha = alpha;
    config.amt2.l2sp_weight = 1.0;
    let mut p = initial_params(&d, 4);
    let mut moco = None;
    let ev = amt2_run(&d, &mut p, &plan_for(&coco, &cells, &config), &cells, &coco, &config, &mut moco).unwrap();
    ev.last().unwrap().anchor_distance.unwrap()
}

#[test]
fn anchor_term_pulls_towards_snapshot() {
    let pulled = final_anchor_distance(1.0);
    let free = final_anchor_distance(0.0);
    assert!(pulled < free, "{pulled} !< {free}");
}

#[test]
fn frozen_backbone_stays_put_in_adaption() {
    let d = det();
    let coco = small(Domain::NaturalLike, 10, 2);
    let cells = small(Domain::CellLike, 4, 3);
    let mut config = quick_config(2);
    longer_amt2(&mut config);
    config.amt2.freeze_backbone_in_adaption = true;
    let mut p = initial_params(&d, 2);
    let mut moco = None;
    let ev = amt2_run(&d, &mut p, &plan_for(&coco, &cells, &config), &cells, &coco, &config, &mut moco).unwrap();
    let adaption: Vec<&TrainEvent> = ev.iter().filter(|e| e.phase == Phase::Adaption).collect();
    assert_eq!(adaption.len(), 6);
    assert!(adaption.iter().all(|e| e.anchor_distance == Some(0.0)));
    // The backbone after the final adaption phase is the last snapshot.
    let snap = ev.iter().rev().find(|e| e.phase == Phase::AnchorSnapshot).unwrap();
    assert_eq!(snap.digest.as_deref(), Some(digest_values(p.values(Group::Backbone)).as_str()));
}

fn finetune_fixture() -> (Detector, Vec<ImageSample>, segpre::data::FewShotSplit) {
    let d = det();
    let data = small(Domain::CellLike, 10, 5);
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let split = make_few_shot_split(&ids, 0.3, 0).unwrap();
    (d, data, split)
}

#[test]
fn finetune_is_supervised_only() {
    let (d, data, split) = finetune_fixture();
    let config = quick_config(0);
    let mut p = initial_params(&d, 0);
    let proj = p.snapshot(Group::Projection);
    let ev = finetune(&d, &mut p, &split, &data, &config).unwrap();
    assert_eq!(ev.len(), config.finetune.steps);
    assert!(ev.iter().all(|e| e.phase == Phase::Finetune && e.losses.contra == 0.0 && e.losses.reg == 0.0));
    assert_eq!(p.values(Group::Projection), &proj[..]);

    let mut c = config.clone();
    c.finetune.l2sp_finetune = true;
    let mut p = initial_params(&d, 0);
    let ev = finetune(&d, &mut p, &split, &data, &c).unwrap();
    assert!(ev.iter().all(|e| e.losses.reg > 0.0 && e.losses.contra == 0.0));
}

#[test]
fn zero_finetune_steps_is_identity() {
    let (d, data, split) = finetune_fixture();
    let mut config = quick_config(0);
    config.finetune.steps = 0;
    let mut p = initial_params(&d, 0);
    let before = p.clone();
    assert!(finetune(&d, &mut p, &split, &data, &config).unwrap().is_empty());
    assert_eq!(p.digest(), before.digest());
    let empty = segpre::data::FewShotSplit {
        selected_ids: vec![],
        ..split
    };
    assert!(finetune(&d, &mut p, &empty, &data, &config).is_err());
}

struct ArmFixture {
    coco: Vec<ImageSample>,
    cells: Vec<ImageSample>,
    few: Vec<ImageSample>,
}

impl ArmFixture {
    fn new() -> Self {
        Self {
            coco: small(Domain::NaturalLike, 10, 7),
            cells: small(Domain::CellLike, 4, 8),
            few: small(Domain::CellLike, 2, 9),
        }
    }
}

/// Phase tags with consecutive repeats collapsed.
fn signature(events: &[TrainEvent]) -> Vec<Phase> {
    let mut s: Vec<Phase> = Vec::new();
    for e in events {
        if s.last() != Some(&e.phase) {
            s.push(e.phase);
        }
    }
    s
}

#[test]
fn arm_signatures() {
    use Phase::*;
    let d = det();
    let fx = ArmFixture::new();
    let few: Vec<&ImageSample> = fx.few.iter().collect();
    let data = ArmData {
        coco: &fx.coco,
        cells: &fx.cells,
        finetune: &few,
    };
    let config = quick_config(3);
    let init = initial_params(&d, 3);
    let amt2_sig = vec![CocoPretrain, Moco, AnchorSnapshot, Adaption, Moco, AnchorSnapshot, Adaption];

    let mut pre = init.clone();
    let pre_ev = coco_pretrain(&d, &mut pre, &fx.coco, &config).unwrap();
    let pretrained = (pre.clone(), pre_ev);

    for arm in Arm::ALL {
        let out = pre_finetune(arm, &d, &config, &data, Some(&pretrained)).unwrap();
        let sig = signature(&out.events);
        match arm {
            Arm::Scratch => {
                assert!(sig.is_empty());
                assert_eq!(out.params.digest(), init.digest());
            }
            Arm::Coco => {
                assert_eq!(sig, vec![CocoPretrain]);
                assert_eq!(out.params.digest(), pre.digest());
            }
            Arm::CellsMoco => {
                assert_eq!(sig, vec![Moco]);
                assert_eq!(out.params.values(Group::Neck), init.values(Group::Neck));
                assert_eq!(out.params.values(Group::Head), init.values(Group::Head));
                assert_ne!(out.params.values(Group::Backbone), init.values(Group::Backbone));
            }
            Arm::CocoPp => {
                assert_eq!(sig, vec![CocoPretrain, Moco]);
                assert_eq!(out.params.values(Group::Neck), pre.values(Group::Neck));
                assert_eq!(out.params.values(Group::Head), pre.values(Group::Head));
                assert_ne!(out.params.values(Group::Backbone), pre.values(Group::Backbone));
            }
            Arm::Cupre | Arm::CupreMm | Arm::CuprePp => assert_eq!(sig, amt2_sig),
        }
    }

    // The anchor term is absent in cupre-mm: at the first adaption step the
    // backbone sits on the anchor, so the penalty is (1 - alpha)·|w|² for
    // cupre and |w|² for cupre-mm.
    let first_reg = |arm: Arm| {
        let out = pre_finetune(arm, &d, &config, &data, Some(&pretrained)).unwrap();
        out.events.iter().find(|e| e.phase == Adaption).unwrap().losses.reg
    };
    let (with, without) = (first_reg(Arm::Cupre), first_reg(Arm::CupreMm));
    assert!(((with / without) - (1.0 - config.amt2.alpha)).abs() < 0.05, "{with} / {without}");

    // Only cupre-pp regularizes fine-tuning.
    for (arm, regularized) in [(Arm::Cupre, false), (Arm::CuprePp, true), (Arm::Scratch, false)] {
        let out = run_arm(arm, &d, &config, &data).unwrap();
        let ft: Vec<&TrainEvent> = out.events.iter().filter(|e| e.phase == Finetune).collect();
        assert_eq!(ft.len(), config.finetune.steps);
        assert_eq!(ft.iter().all(|e| e.losses.reg > 0.0), regularized, "{arm}");
        assert_eq!(signature(&out.events).last(), Some(&Finetune));
    }
}

#[test]
fn same_seed_same_parameters() {
    let d = det();
    let fx = ArmFixture::new();
    let few: Vec<&ImageSample> = fx.few.iter().collect();
    let data = ArmData {
        coco: &fx.coco,
        cells: &fx.cells,
        finetune: &few,
    };
    let run = |seed| run_arm(Arm::Cupre, &d, &quick_config(seed), &data).unwrap();
    let (a, b, c) = (run(6), run(6), run(7));
    assert_eq!(a.params.digest(), b.params.digest());
    assert_ne!(a.params.digest(), c.params.digest());
    let queue = |m: &Option<MoCoState>| m.as_ref().unwrap().queue.raw().to_vec();
    assert_eq!(queue(&a.moco), queue(&b.moco));
}

#[test]
fn finetune_on_rejects_empty_input() {
    let d = det();
    let mut p: DetectorParams = initial_params(&d, 0);
    assert!(finetune_on(&d, &mut p, &[], &quick_config(0)).is_err());
}
