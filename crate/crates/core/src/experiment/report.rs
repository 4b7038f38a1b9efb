use std::fmt::Write as _;

use super::config::ExperimentConfig;
use super::eval::PairSummary;
use crate::detect_eval::EvalReport;
use crate::transport::{size_table, Dtype, SizeRow};

/// Channel counts of the shared-feature size table.
pub const SIZE_TABLE_CHANNELS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
/// Feature grids of the full-size 40 m and 100 m setups.
pub const FULL_SIZE_GRIDS: [(usize, usize); 2] = [(52, 52), (104, 104)];

/// Size table rows for the full-size grids and the configured toy grid.
pub fn report_size_table(cfg: &ExperimentConfig) -> Vec<SizeRow> {
    let n = cfg.pipeline(cfg.model.transmitted_channels[0]).feature_size();
    let mut grids = FULL_SIZE_GRIDS.to_vec();
    grids.push((n, n));
    size_table(&grids, &SIZE_TABLE_CHANNELS, Dtype::F32)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Plain-text table and a delimited file (`section,ct,model,key,metric,value`)
/// with the same numbers.
pub fn render_report(cfg: &ExperimentConfig, hash: &str, summaries: &[PairSummary]) -> (String, String) {
    let e = &cfg.eval;
    let mut t = String::new();
    let mut c = format!("# config_hash={hash}\nsection,ct,model,key,metric,value\n");
    let preset = format!("{:?}", cfg.preset).to_lowercase();
    let _ = writeln!(t, "config hash  {hash}");
    let _ = writeln!(t, "preset       {preset}");
    let _ = writeln!(t, "thresholds   IoU {} / confidence {} / NMS IoU {}", e.iou_threshold, e.conf_threshold, e.nms_iou);

    let _ = writeln!(t, "\nDetection performance");
    let _ = writeln!(t, "{:>4}  {:<8}  {:>9}  {:>7}  {:>5}  {:>5}  {:>5}  {:>9}", "C_t", "model", "precision", "recall", "tp", "fp", "fn", "delivered");
    for s in summaries {
        for (name, r) in [("baseline", &s.baseline), ("fs-cod", &s.fscod)] {
            let delivered = if name == "fs-cod" { format!("{}/{}", s.delivered, s.frames) } else { "-".into() };
            let _ = writeln!(
                t,
                "{:>4}  {:<8}  {:>9.4}  {:>7.4}  {:>5}  {:>5}  {:>5}  {:>9}",
                s.transmitted_channels, name, r.precision(), r.recall(), r.counts.tp, r.counts.fp, r.counts.fn_, delivered
            );
            for (metric, v) in [("precision", r.precision()), ("recall", r.recall())] {
                let _ = writeln!(c, "detection,{},{name},iou={},{metric},{v:?}", s.transmitted_channels, e.iou_threshold);
            }
            for (metric, v) in [("tp", r.counts.tp), ("fp", r.counts.fp), ("fn", r.counts.fn_)] {
                let _ = writeln!(c, "detection,{},{name},iou={},{metric},{v}", s.transmitted_channels, e.iou_threshold);
            }
        }
    }

    let _ = writeln!(t, "\nRecall by category (number of single-vehicle runs that find the target)");
    let _ = writeln!(t, "{:>4}  {:>8}  {:>7}  {:>8}  {:>8}", "C_t", "category", "targets", "baseline", "fs-cod");
    for s in summaries {
        for k in 0..3 {
            let _ = writeln!(
                t,
                "{:>4}  {:>8}  {:>7}  {:>8}  {:>8}",
                s.transmitted_channels,
                k,
                s.baseline.category_targets[k],
                opt(s.baseline.category_recall(k)),
                opt(s.fscod.category_recall(k))
            );
            let _ = writeln!(c, "category,{},all,category={k},targets,{}", s.transmitted_channels, s.baseline.category_targets[k]);
            for (name, r) in [("baseline", &s.baseline), ("fs-cod", &s.fscod)] {
                let _ = writeln!(c, "category,{},{name},category={k},hits,{}", s.transmitted_channels, r.category_hits[k]);
            }
        }
        let _ = writeln!(
            t,
            "{:>4}  {:>8}  {:>7}  {:>8}  {:>8}",
            s.transmitted_channels,
            "flagged",
            s.baseline.flagged_targets,
            opt(s.baseline.flagged_recall()),
            opt(s.fscod.flagged_recall())
        );
        let _ = writeln!(c, "category,{},all,flagged,targets,{}", s.transmitted_channels, s.baseline.flagged_targets);
        for (name, r) in [("baseline", &s.baseline), ("fs-cod", &s.fscod)] {
            let _ = writeln!(c, "category,{},{name},flagged,hits,{}", s.transmitted_channels, r.flagged_hits);
        }
    }

    let _ = writeln!(t, "\nPrecision and recall versus IoU threshold");
    let _ = writeln!(t, "{:>4}  {:<8}  {:>5}  {:>9}  {:>7}", "C_t", "model", "IoU", "precision", "recall");
    for s in summaries {
        for (name, sweep) in [("baseline", &s.baseline_sweep), ("fs-cod", &s.fscod_sweep)] {
            for p in sweep {
                let _ = writeln!(t, "{:>4}  {:<8}  {:>5.2}  {:>9.4}  {:>7.4}", s.transmitted_channels, name, p.iou, p.precision, p.recall);
                let _ = writeln!(c, "sweep,{},{name},iou={},precision,{:?}", s.transmitted_channels, p.iou, p.precision);
                let _ = writeln!(c, "sweep,{},{name},iou={},recall,{:?}", s.transmitted_channels, p.iou, p.recall);
            }
        }
    }

    let _ = writeln!(t, "\nShared feature map size, 32-bit floats, no sparsity");
    let _ = writeln!(t, "{:>9}  {:>4}  {:>10}", "grid", "C_t", "bytes");
    for r in report_size_table(cfg) {
        let grid = format!("{}x{}", r.height, r.width);
        let _ = writeln!(t, "{grid:>9}  {:>4}  {:>10}", r.channels, r.bytes);
        let _ = writeln!(c, "size,{},f32,grid={grid},bytes,{}", r.channels, r.bytes);
    }
    (t, c)
}

/// Short one-screen comparison used in logs.
pub fn headline(s: &PairSummary) -> String {
    let f = |r: &EvalReport| format!("P {:.3} R {:.3} cat0 {} flagged {}", r.precision(), r.recall(), opt(r.category_recall(0)), opt(r.flagged_recall()));
    format!("C_t={}: baseline [{}] fs-cod [{}]", s.transmitted_channels, f(&s.baseline), f(&s.fscod))
}
