// scratch pilot for schedule calibration (removed before release)
use fadnet::kitti::TargetConfig;
use fadnet::losses::LossConfig;
use fadnet::model::{ModelConfig, Variant};
use fadnet::synthetic::{generate_synthetic, SyntheticConfig};
use fadnet::train::{samples_from_scenes, StageSchedule, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let unit: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let lr1: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let halve: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr23: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5e-5);
    let mut cfg = ModelConfig { categories: 1, height: 32, width: 32, backbone_width: 32, ..Default::default() };
    Variant::Full.apply(&mut cfg);
    let mut syn = SyntheticConfig::for_model(&cfg, vec!["Car".to_string()], 7, 8, 1);
    syn.z_range = (9.0, 11.0);
    syn.focal = 25.6;
    let scenes = generate_synthetic(&syn).unwrap();
    let tc = TargetConfig::new(&cfg, syn.categories.clone(), syn.templates.clone());
    let (samples, mean, std) = samples_from_scenes(&scenes, &tc).unwrap();
    println!("objects/frame: {:?}", samples.iter().map(|s| s.targets.objects.len()).collect::<Vec<_>>());

    let mut schedule = StageSchedule::staged(unit, lr1, lr23, 2, &cfg);
    if halve > 0 {
        schedule.stages[0].lr_halve_every = halve;
    }
    schedule.batch_size = 2;
    let mut trainer = Trainer::new(cfg, LossConfig::default(), schedule, syn.templates.clone(), 7, (mean, std)).unwrap();
    let t0 = Instant::now();
    let total = trainer.schedule.total_epochs();
    while trainer.epoch < total {
        trainer.run_epoch(&samples).unwrap();
        let l = trainer.logs.last().unwrap();
        if trainer.epoch % 40 == 0 || trainer.epoch == total {
            println!(
                "epoch {:4} lr {:.2e} kp {:.4} r2 {:.4} r3 {:.4} dh {:.4} total {:.4}  [{:.1}s]",
                l.epoch, l.lr, l.kp, l.reg2d, l.reg3d, l.dh, l.total, t0.elapsed().as_secs_f64()
            );
        }
    }
    let full = trainer.evaluate_loss(&samples).unwrap();
    println!("final full-weighted loss {:.5}  elapsed {:.1}s", full, t0.elapsed().as_secs_f64());
    {
        use fadnet::losses::{batch_loss, frame_loss_terms, StageLossMask};
        use fadnet::model::{bind_params, forward};
        use fadnet::tensor::Graph;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &trainer.params, &trainer.model_cfg, &|_| false).unwrap();
        let mut terms = Vec::new();
        for s in &samples {
            let img = g.leaf(&s.image);
            let out = forward(&mut g, &trainer.model_cfg, &bound, img).unwrap();
            terms.push(frame_loss_terms(&mut g, &out, &s.targets, &s.intrinsics, &trainer.templates, &trainer.loss_cfg).unwrap());
        }
        let b = batch_loss(&mut g, &terms, &trainer.loss_cfg, &StageLossMask::default()).unwrap();
        let v = |id: Option<fadnet::tensor::TensorId>| id.map(|i| g.scalar_value(i)).unwrap_or(0.0);
        println!("end parts: kp {:.5} r2w {:.5} r3 {:.5} dh {:.5}", v(b.parts.kp), v(b.parts.reg2d), v(b.parts.reg3d), v(b.parts.dh));
    }

    // decode quality
    let mut center_err = Vec::new();
    let mut depth_err = Vec::new();
    let mut iou3 = Vec::new();
    for s in &samples {
        let (dets, _) = trainer.infer(&s.image, &s.intrinsics, 0.25, 100).unwrap();
        for o in &s.targets.objects {
            let best = dets.iter().max_by(|a, b| {
                fadnet::eval::iou_3d(&a.box3d, &o.box3d).partial_cmp(&fadnet::eval::iou_3d(&b.box3d, &o.box3d)).unwrap()
            });
            if let Some(d) = best {
                let (u, v) = s.intrinsics.project([d.box3d.x, d.box3d.y, d.box3d.z]).unwrap();
                let (gu, gv) = s.intrinsics.project([o.box3d.x, o.box3d.y, o.box3d.z]).unwrap();
                center_err.push(((u - gu).powi(2) + (v - gv).powi(2)).sqrt());
                depth_err.push((d.box3d.z - o.box3d.z).abs());
                iou3.push(fadnet::eval::iou_3d(&d.box3d, &o.box3d));
            } else {
                center_err.push(f64::INFINITY);
                depth_err.push(f64::INFINITY);
                iou3.push(0.0);
            }
        }
    }
    let frac = iou3.iter().zip(&center_err).zip(&depth_err).filter(|((i, c), d)| **i > 0.5 && **c < 2.0 && **d < 0.5).count() as f64 / iou3.len() as f64;
    println!("center err max {:.2}px  depth err max {:.2}m  iou3d min {:.3}  pass frac {:.2}",
        center_err.iter().cloned().fold(0.0, f64::max),
        depth_err.iter().cloned().fold(0.0, f64::max),
        iou3.iter().cloned().fold(1.0, f64::min),
        frac);
}
