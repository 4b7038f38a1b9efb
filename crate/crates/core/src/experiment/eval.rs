use std::fmt::Write as _;

use log::warn;

use super::config::{EvalConfig, ExperimentConfig};
use super::data::ego_targets;
use crate::detect_eval::{
    categorize_targets, decode, match_and_score, nms, pr_vs_iou_sweep, Detection, EvalReport, FrameResult, OrientedBox, SweepPoint,
};
use crate::error::ExperimentError;
use crate::fscod::{bev_from_cloud, CoopDetector, DetectionGrid};
use crate::scene_sim::Dataset;
use crate::transport::{decode_message, encode_message, Delivery, Dtype, Link};

/// Everything needed to recompute the scores of one validation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub scene_seed: u64,
    pub delivered: bool,
    pub gts: Vec<OrientedBox<f64>>,
    /// Index into `gts` of the scene's flagged occluded target.
    pub flagged: Option<usize>,
    pub baseline_ego: Vec<Detection<f64>>,
    /// Baseline run on the coop vehicle, moved into the ego frame.
    pub baseline_coop: Vec<Detection<f64>>,
    pub fscod: Vec<Detection<f64>>,
}

fn postprocess(grid: &DetectionGrid<f32>, eval: &EvalConfig) -> Vec<Detection<f64>> {
    nms(&decode(grid, eval.conf_threshold), eval.nms_iou)
        .iter()
        .map(|d| Detection { bbox: d.bbox.cast(), confidence: d.confidence as f64 })
        .collect()
}

/// Run both detectors over the validation frames. The coop feature map goes
/// through the wire format and `link`; a dropped message makes FS-COD fall
/// back to the single-vehicle path.
pub fn evaluate_pair(
    cfg: &ExperimentConfig,
    baseline: &CoopDetector<f32>,
    fscod: &CoopDetector<f32>,
    val: &Dataset,
    link: &mut Link,
) -> Result<Vec<FrameRecord>, ExperimentError> {
    let grid = baseline.config().grid;
    let mut out = Vec::with_capacity(val.samples.len());
    for (frame, s) in val.samples.iter().enumerate() {
        let sc = &s.scene;
        let ego_bev = bev_from_cloud::<f32, f32>(&s.ego_cloud, &sc.ego_pose, &grid);
        let coop_bev = bev_from_cloud::<f32, f32>(&s.coop_cloud, &sc.coop_pose, &grid);
        let (gts, flagged) = ego_targets(sc, val.lidar.range_m, &grid);

        let baseline_ego = postprocess(&baseline.run_baseline(&ego_bev)?, &cfg.eval);
        let (dx, dy) = (sc.coop_pose.x - sc.ego_pose.x, sc.coop_pose.y - sc.ego_pose.y);
        let baseline_coop = postprocess(&baseline.run_baseline(&coop_bev)?, &cfg.eval)
            .iter()
            .map(|d| d.translated(dx, dy))
            .collect();

        let shared = fscod.extract_features(&coop_bev, &sc.coop_pose)?;
        let bytes = encode_message(&shared, frame as u64, 1, Dtype::F32)?;
        let received = match link.send(&bytes) {
            Delivery::Delivered { bytes, .. } => Some(decode_message(&bytes)?),
            Delivery::Dropped => None,
        };
        let run = fscod.run_coop_message(&ego_bev, &sc.ego_pose, received.as_ref())?;
        if let Some(w) = &run.warning {
            warn!("frame {frame}: {w}");
        }
        out.push(FrameRecord {
            frame,
            scene_seed: sc.seed,
            delivered: received.is_some(),
            gts,
            flagged,
            baseline_ego,
            baseline_coop,
            fscod: postprocess(&run.grid, &cfg.eval),
        });
    }
    Ok(out)
}

/// Scores of both detectors for one transmitted-channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub transmitted_channels: usize,
    pub frames: usize,
    pub delivered: usize,
    pub baseline: EvalReport,
    pub fscod: EvalReport,
    pub baseline_sweep: Vec<SweepPoint>,
    pub fscod_sweep: Vec<SweepPoint>,
}

pub fn summarize(ct: usize, records: &[FrameRecord], eval: &EvalConfig) -> PairSummary {
    let t = eval.iou_threshold;
    let mut baseline = EvalReport::default();
    let mut fscod = EvalReport::default();
    for r in records {
        let cats = categorize_targets(&r.gts, &r.baseline_ego, &r.baseline_coop, t);
        baseline.add_frame(&match_and_score(&r.baseline_ego, &r.gts, t), &cats, r.flagged);
        fscod.add_frame(&match_and_score(&r.fscod, &r.gts, t), &cats, r.flagged);
    }
    let frames = |pick: fn(&FrameRecord) -> &Vec<Detection<f64>>| -> Vec<FrameResult<f64>> {
        records.iter().map(|r| FrameResult { dets: pick(r).clone(), gts: r.gts.clone() }).collect()
    };
    PairSummary {
        transmitted_channels: ct,
        frames: records.len(),
        delivered: records.iter().filter(|r| r.delivered).count(),
        baseline_sweep: pr_vs_iou_sweep(&frames(|r| &r.baseline_ego), &eval.sweep),
        fscod_sweep: pr_vs_iou_sweep(&frames(|r| &r.fscod), &eval.sweep),
        baseline,
        fscod,
    }
}

const RECORD_HEADER: &str = "frame,scene_seed,delivered,kind,cx,cy,w,l,yaw,confidence";

/// Delimited dump of the records. Floats use shortest round-trip formatting
/// so reading the file back reproduces the records exactly.
pub fn records_to_csv(hash: &str, ct: usize, records: &[FrameRecord]) -> String {
    let mut s = format!("# config_hash={hash}\n# ct={ct}\n{RECORD_HEADER}\n");
    for r in records {
        let head = format!("{},{},{}", r.frame, r.scene_seed, r.delivered as u8);
        let _ = writeln!(s, "{head},frame,,,,,,");
        for (i, g) in r.gts.iter().enumerate() {
            let kind = if r.flagged == Some(i) { "gt_flagged" } else { "gt" };
            let _ = writeln!(s, "{head},{kind},{:?},{:?},{:?},{:?},{:?},", g.cx, g.cy, g.w, g.l, g.yaw);
        }
        for (kind, dets) in [("baseline_ego", &r.baseline_ego), ("baseline_coop", &r.baseline_coop), ("fscod", &r.fscod)] {
            for d in dets {
                let b = &d.bbox;
                let _ = writeln!(s, "{head},{kind},{:?},{:?},{:?},{:?},{:?},{:?}", b.cx, b.cy, b.w, b.l, b.yaw, d.confidence);
            }
        }
    }
    s
}

/// Inverse of [`records_to_csv`]; returns the embedded config hash, the
/// channel count and the records.
pub fn records_from_csv(text: &str) -> Result<(String, usize, Vec<FrameRecord>), ExperimentError> {
    let bad = |line: usize, m: &str| ExperimentError::Mismatch(format!("records line {}: {m}", line + 1));
    let mut hash = None;
    let mut ct = None;
    let mut records: Vec<FrameRecord> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# config_hash=") {
            hash = Some(rest.to_string());
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ct=") {
            ct = Some(rest.parse::<usize>().map_err(|_| bad(ln, "bad ct"))?);
            continue;
        }
        if line == RECORD_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(ln, "expected 10 fields"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(ln, "bad number"));
        if f[3] == "frame" {
            records.push(FrameRecord {
                frame: f[0].parse().map_err(|_| bad(ln, "bad frame"))?,
                scene_seed: f[1].parse().map_err(|_| bad(ln, "bad seed"))?,
                delivered: f[2] == "1",
                gts: vec![],
                flagged: None,
                baseline_ego: vec![],
                baseline_coop: vec![],
                fscod: vec![],
            });
            continue;
        }
        let r = records.last_mut().ok_or_else(|| bad(ln, "row before first frame"))?;
        let bbox = OrientedBox { cx: num(4)?, cy: num(5)?, w: num(6)?, l: num(7)?, yaw: num(8)? };
        match f[3] {
            "gt" | "gt_flagged" => {
                if f[3] == "gt_flagged" {
                    r.flagged = Some(r.gts.len());
                }
                r.gts.push(bbox);
            }
            kind => {
                let d = Detection { bbox, confidence: num(9)? };
                match kind {
                    "baseline_ego" => r.baseline_ego.push(d),
                    "baseline_coop" => r.baseline_coop.push(d),
                    "fscod" => r.fscod.push(d),
                    _ => return Err(bad(ln, "unknown row kind")),
                }
            }
        }
    }
    Ok((hash.ok_or_else(|| bad(0, "missing config hash"))?, ct.ok_or_else(|| bad(0, "missing ct"))?, records))
}
