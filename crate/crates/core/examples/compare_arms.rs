//! Holdout AP_bbox of the scratch, coco, cells-moco and cupre arms on the
//! synthetic two-domain corpus, averaged over seeds.
//!
//! cargo run --release --example compare_arms -- [seeds] [first-seed]

use std::time::Instant;

use segpre::data::{make_few_shot_split, synth_dataset, Domain, ImageSample};
use segpre::eval::{decode_predictions, evaluate, ground_truth_of, DecodeConfig};
use segpre::model::{prepare_input, Detector, DetectorParams, ModelConfig};
use segpre::trainer::{coco_pretrain, finetune_on, initial_params, pre_finetune, Arm, ArmData, TrainConfig};

fn holdout_ap(det: &Detector, p: &DetectorParams, hold: &[ImageSample]) -> segpre::Result<f64> {
    let mut preds = Vec::new();
    for s in hold {
        let x = prepare_input(&s.gray(), s.height, s.width)?;
        let out = det.forward(p, &x, (s.height, s.width))?;
        preds.extend(decode_predictions(&out, &s.id, &DecodeConfig::default())?);
    }
    Ok(evaluate(&preds, &ground_truth_of(hold), hold.len())?.ap_bbox.unwrap_or(0.0))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(5), |s| s.parse())?;
    let first: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let det = Detector::new(ModelConfig::default())?.0;
    let arms = [Arm::Scratch, Arm::Coco, Arm::CellsMoco, Arm::Cupre];
    let hold = synth_dataset(Domain::CellLike, 50, 4000)?;
    let mut sums = [0.0; 4];
    for seed in first..first + seeds {
        let t = Instant::now();
        let cells = synth_dataset(Domain::CellLike, 200, 1000 + seed)?;
        let coco = synth_dataset(Domain::NaturalLike, 100, 2000 + seed)?;
        let pool = synth_dataset(Domain::CellLike, 200, 3000 + seed)?;
        let ids: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
        let split = make_few_shot_split(&ids, 0.05, seed)?;
        let few: Vec<&ImageSample> = pool.iter().filter(|s| split.selected_ids.contains(&s.id)).collect();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let data = ArmData {
            coco: &coco,
            cells: &cells,
            finetune: &few,
        };
        let mut pre = initial_params(&det, seed);
        let ev = coco_pretrain(&det, &mut pre, &coco, &config)?;
        let pretrained = (pre, ev);
        let mut line = Vec::new();
        for (i, arm) in arms.iter().enumerate() {
            let mut out = pre_finetune(*arm, &det, &config, &data, Some(&pretrained))?;
            finetune_on(&det, &mut out.params, &few, &arm.configure(&config))?;
            let ap = holdout_ap(&det, &out.params, &hold)?;
            sums[i] += ap;
            line.push(format!("{arm} {ap:.4}"));
        }
        println!("seed {seed} ({:.0}s): {}", t.elapsed().as_secs_f64(), line.join(", "));
    }
    for (arm, sum) in arms.iter().zip(sums) {
        println!("{arm:>10}: {:.4}", sum / seeds as f64);
    }
    Ok(())
}
