//! CLEAR-MOT accuracy, identity switches and identity F1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::matching::{hungarian, CostMatrix};
use crate::scalar::Scalar;
use crate::simulator::Clip;
use crate::tracker::TrackOutput;

/// Cost of pairing boxes that overlap less than the threshold. Larger than
/// any sum of admissible `1 - iou` costs in realistic frames, so the solver
/// maximizes admissible pairs before minimizing their cost.
const FORBIDDEN: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub id: u64,
    pub bbox: BBox<f64>,
}

/// Boxes grouped by frame number.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub frames: BTreeMap<usize, Vec<Labeled>>,
}

impl Annotations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: usize, id: u64, bbox: BBox<f64>) {
        self.frames.entry(frame).or_default().push(Labeled { id, bbox });
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, f: usize) -> &[Labeled] {
        self.frames.get(&f).map_or(&[], Vec::as_slice)
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.frames.values().flatten().map(|l| l.id).collect()
    }

    /// Visible objects of every frame, numbered from one.
    pub fn from_clip<T: Scalar>(clip: &Clip<T>) -> Self {
        let mut a = Self::new();
        for (i, f) in clip.frames.iter().enumerate() {
            a.frames.entry(i + 1).or_default();
            for o in f.objects.iter().filter(|o| o.visible) {
                a.push(i + 1, o.id.0, o.bbox.cast());
            }
        }
        a
    }

    pub fn from_tracks<T: Scalar>(tracks: &[TrackOutput<T>]) -> Self {
        let mut a = Self::new();
        for t in tracks {
            a.push(t.frame, t.track_id.0, t.bbox.cast());
        }
        a
    }

    /// Frame numbers present in either input, ascending.
    fn union_frames(&self, other: &Self) -> BTreeSet<usize> {
        self.frames.keys().chain(other.frames.keys()).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearMot {
    pub mota: f64,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub matches: usize,
    pub n_gt: usize,
}

/// Optimal one-to-one pairing of `gt` and `hyp` boxes with iou at least
/// `threshold`; returns index pairs.
pub fn match_frame(gt: &[Labeled], hyp: &[Labeled], threshold: f64) -> Vec<(usize, usize)> {
    if gt.is_empty() || hyp.is_empty() {
        return Vec::new();
    }
    let mut data = Vec::with_capacity(gt.len() * hyp.len());
    for g in gt {
        for h in hyp {
            let o = iou(&g.bbox, &h.bbox);
            data.push(if o >= threshold { 1.0 - o } else { FORBIDDEN });
        }
    }
    let cost = CostMatrix::new(gt.len(), hyp.len(), data).expect("finite costs");
    hungarian(&cost)
        .pairs()
        .filter(|&(r, c)| cost.get(r, c) < FORBIDDEN)
        .collect()
}

/// Frame-by-frame CLEAR matching: last frame's correspondences are kept
/// while they still overlap, the rest are matched optimally.
pub fn clear_mot(gt: &Annotations, hyp: &Annotations, threshold: f64) -> ClearMot {
    let mut active: HashMap<u64, u64> = HashMap::new();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let (mut fp, mut fn_, mut ids, mut matches, mut n_gt) = (0, 0, 0, 0, 0);
    for f in gt.union_frames(hyp) {
        let (g, h) = (gt.frame(f), hyp.frame(f));
        n_gt += g.len();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        for (gi, gl) in g.iter().enumerate() {
            let Some(&hid) = active.get(&gl.id) else { continue };
            let Some(hi) = h.iter().position(|x| x.id == hid) else { continue };
            if !h_used[hi] && iou(&gl.bbox, &h[hi].bbox) >= threshold {
                g_used[gi] = true;
                h_used[hi] = true;
                pairs.push((gi, hi));
            }
        }
        let g_rest: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let h_rest: Vec<usize> = (0..h.len()).filter(|&i| !h_used[i]).collect();
        let gr: Vec<Labeled> = g_rest.iter().map(|&i| g[i]).collect();
        let hr: Vec<Labeled> = h_rest.iter().map(|&i| h[i]).collect();
        pairs.extend(match_frame(&gr, &hr, threshold).into_iter().map(|(a, b)| (g_rest[a], h_rest[b])));

        active.clear();
        for &(gi, hi) in &pairs {
            let (gid, hid) = (g[gi].id, h[hi].id);
            if last.get(&gid).is_some_and(|&prev| prev != hid) {
                ids += 1;
            }
            last.insert(gid, hid);
            active.insert(gid, hid);
        }
        matches += pairs.len();
        fn_ += g.len() - pairs.len();
        fp += h.len() - pairs.len();
    }
    ClearMot {
        mota: 1.0 - (fn_ + fp + ids) as f64 / n_gt.max(1) as f64,
        fp,
        fn_,
        ids,
        matches,
        n_gt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdScores {
    pub idf1: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Frames in which each (gt track, hyp track) pair overlaps by `threshold`.
pub fn overlap_counts(gt: &Annotations, hyp: &Annotations, threshold: f64) -> (Vec<u64>, Vec<u64>, Vec<Vec<usize>>) {
    let gids: Vec<u64> = gt.ids().into_iter().collect();
    let hids: Vec<u64> = hyp.ids().into_iter().collect();
    let gix: HashMap<u64, usize> = gids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let hix: HashMap<u64, usize> = hids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut m = vec![vec![0usize; hids.len()]; gids.len()];
    for f in gt.union_frames(hyp) {
        for g in gt.frame(f) {
            for h in hyp.frame(f) {
                if iou(&g.bbox, &h.bbox) >= threshold {
                    m[gix[&g.id]][hix[&h.id]] += 1;
                }
            }
        }
    }
    (gids, hids, m)
}

/// Identity F1 under the trajectory-level bijection that maximizes the number
/// of frames where paired trajectories overlap.
pub fn idf1(gt: &Annotations, hyp: &Annotations, threshold: f64) -> IdScores {
    let (gids, hids, m) = overlap_counts(gt, hyp, threshold);
    let idtp = if gids.is_empty() || hids.is_empty() {
        0
    } else {
        let data = m.iter().flatten().map(|&c| -(c as f64)).collect();
        let cost = CostMatrix::new(gids.len(), hids.len(), data).expect("finite costs");
        hungarian(&cost).pairs().map(|(r, c)| m[r][c]).sum()
    };
    let idfn = gt.len() - idtp;
    let idfp = hyp.len() - idtp;
    let denom = 2 * idtp + idfp + idfn;
    IdScores {
        idf1: if denom == 0 { 1.0 } else { 2.0 * idtp as f64 / denom as f64 },
        idtp,
        idfp,
        idfn,
    }
}

/// Totals over one or more sequences.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub ids: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub n_gt: usize,
    pub n_hyp: usize,
}

impl MetricsReport {
    pub fn evaluate(gt: &Annotations, hyp: &Annotations, threshold: f64) -> Self {
        let c = clear_mot(gt, hyp, threshold);
        let i = idf1(gt, hyp, threshold);
        Self {
            mota: c.mota,
            idf1: i.idf1,
            ids: c.ids,
            fp: c.fp,
            fn_: c.fn_,
            idtp: i.idtp,
            idfp: i.idfp,
            idfn: i.idfn,
            n_gt: c.n_gt,
            n_hyp: hyp.len(),
        }
    }

    /// Pools counts, then recomputes the ratios.
    pub fn combine(parts: &[Self]) -> Self {
        let mut r = Self::default();
        for p in parts {
            r.ids += p.ids;
            r.fp += p.fp;
            r.fn_ += p.fn_;
            r.idtp += p.idtp;
            r.idfp += p.idfp;
            r.idfn += p.idfn;
            r.n_gt += p.n_gt;
            r.n_hyp += p.n_hyp;
        }
        r.mota = 1.0 - (r.fn_ + r.fp + r.ids) as f64 / r.n_gt.max(1) as f64;
        let denom = 2 * r.idtp + r.idfp + r.idfn;
        r.idf1 = if denom == 0 { 1.0 } else { 2.0 * r.idtp as f64 / denom as f64 };
        r
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "mota={}\nidf1={}\nids={}\nfp={}\nfn={}\nidtp={}\nidfp={}\nidfn={}\nn_gt={}\nn_hyp={}\n",
            self.mota, self.idf1, self.ids, self.fp, self.fn_, self.idtp, self.idfp, self.idfn, self.n_gt, self.n_hyp
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "MOTA  {:>8.4}", self.mota)?;
        writeln!(f, "IDF1  {:>8.4}", self.idf1)?;
        writeln!(f, "IDS   {:>8}", self.ids)?;
        writeln!(f, "FP    {:>8}", self.fp)?;
        writeln!(f, "FN    {:>8}", self.fn_)?;
        write!(f, "GT    {:>8}", self.n_gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64) -> BBox<f64> {
        BBox::new(x, 0.5, 0.1, 0.1)
    }

    fn split_track() -> (Annotations, Annotations) {
        let mut gt = Annotations::new();
        let mut hyp = Annotations::new();
        for f in 1..=10 {
            gt.push(f, 1, b(0.5));
            hyp.push(f, if f <= 5 { 100 } else { 200 }, b(0.5));
        }
        (gt, hyp)
    }

    #[test]
    fn self_evaluation() {
        let (gt, _) = split_track();
        let r = MetricsReport::evaluate(&gt, &gt, 0.5);
        assert_eq!((r.mota, r.idf1, r.ids, r.fp, r.fn_), (1.0, 1.0, 0, 0, 0));
    }

    #[test]
    fn empty_hypothesis() {
        let (gt, _) = split_track();
        let c = clear_mot(&gt, &Annotations::new(), 0.5);
        assert_eq!((c.mota, c.fn_), (0.0, 10));
        assert_eq!(idf1(&gt, &Annotations::new(), 0.5).idf1, 0.0);
    }

    #[test]
    fn split_track_scores() {
        let (gt, hyp) = split_track();
        let c = clear_mot(&gt, &hyp, 0.5);
        assert_eq!((c.fp, c.fn_, c.ids), (0, 0, 1));
        assert!((c.mota - 0.9).abs() < 1e-15);
        let i = idf1(&gt, &hyp, 0.5);
        assert_eq!((i.idtp, i.idfp, i.idfn), (5, 5, 5));
        assert_eq!(i.idf1, 0.5);
    }

    #[test]
    fn swapped_labels_are_free() {
        let mut gt = Annotations::new();
        let mut hyp = Annotations::new();
        for f in 1..=6 {
            gt.push(f, 1, b(0.2));
            gt.push(f, 2, b(0.7));
            hyp.push(f, 2, b(0.2));
            hyp.push(f, 1, b(0.7));
        }
        assert_eq!(idf1(&gt, &hyp, 0.5).idf1, 1.0);
        assert_eq!(clear_mot(&gt, &hyp, 0.5).ids, 0);
    }

    #[test]
    fn carry_over_beats_better_overlap() {
        // hyp 10 keeps following gt 1 even when hyp 20 overlaps gt 1 better
        let mut gt = Annotations::new();
        let mut hyp = Annotations::new();
        gt.push(1, 1, b(0.5));
        hyp.push(1, 10, b(0.5));
        gt.push(2, 1, b(0.5));
        hyp.push(2, 10, b(0.51));
        hyp.push(2, 20, b(0.5));
        let c = clear_mot(&gt, &hyp, 0.5);
        assert_eq!((c.ids, c.fp), (0, 1));
    }

    #[test]
    fn switch_counted_against_last_match_after_gap() {
        let mut gt = Annotations::new();
        let mut hyp = Annotations::new();
        for f in 1..=3 {
            gt.push(f, 1, b(0.5));
        }
        hyp.push(1, 10, b(0.5));
        hyp.push(3, 20, b(0.5));
        let c = clear_mot(&gt, &hyp, 0.5);
        assert_eq!((c.ids, c.fn_), (1, 1));
    }

    fn arb_scene(max_tracks: usize) -> impl Strategy<Value = (Annotations, Annotations)> {
        let frame = (1usize..=6, 0..max_tracks as u64, 0usize..5);
        let gt = prop::collection::vec(frame.clone(), 0..20);
        let hyp = prop::collection::vec(frame, 0..20);
        (gt, hyp).prop_map(|(g, h)| {
            let build = |v: Vec<(usize, u64, usize)>| {
                let mut a = Annotations::new();
                let mut seen = std::collections::HashSet::new();
                for (f, id, pos) in v {
                    if seen.insert((f, id)) {
                        a.push(f, id, b(0.1 + 0.2 * pos as f64));
                    }
                }
                a
            };
            (build(g), build(h))
        })
    }

    fn brute_idtp(m: &[Vec<usize>], gi: usize, used: &mut Vec<bool>) -> usize {
        if gi == m.len() {
            return 0;
        }
        let mut best = brute_idtp(m, gi + 1, used);
        for h in 0..used.len() {
            if !used[h] {
                used[h] = true;
                best = best.max(m[gi][h] + brute_idtp(m, gi + 1, used));
                used[h] = false;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn idf1_matches_bijection_search((gt, hyp) in arb_scene(6)) {
            let (_, hids, m) = overlap_counts(&gt, &hyp, 0.5);
            let best = brute_idtp(&m, 0, &mut vec![false; hids.len()]);
            prop_assert_eq!(idf1(&gt, &hyp, 0.5).idtp, best);
        }

        #[test]
        fn relabeling_invariance((gt, hyp) in arb_scene(5), shift in 1u64..1000) {
            let mut moved = Annotations::new();
            for (&f, v) in &hyp.frames {
                for l in v {
                    moved.push(f, l.id * 7 + shift, l.bbox);
                }
            }
            prop_assert_eq!(MetricsReport::evaluate(&gt, &hyp, 0.5), MetricsReport::evaluate(&gt, &moved, 0.5));
        }

        #[test]
        fn mota_bounded((gt, hyp) in arb_scene(5)) {
            let r = MetricsReport::evaluate(&gt, &hyp, 0.5);
            prop_assert!(r.mota <= 1.0);
            prop_assert!(r.idf1 >= 0.0 && r.idf1 <= 1.0);
            let s = MetricsReport::evaluate(&gt, &gt, 0.5);
            prop_assert_eq!((s.mota, s.ids), (1.0, 0));
        }

        #[test]
        fn frame_matching_is_maximal((gt, hyp) in arb_scene(5)) {
            // per frame the solver finds as many admissible pairs as exhaustive search
            for f in gt.union_frames(&hyp) {
                let (g, h) = (gt.frame(f), hyp.frame(f));
                let ok: Vec<Vec<usize>> = g.iter()
                    .map(|a| h.iter().map(|c| usize::from(iou(&a.bbox, &c.bbox) >= 0.5)).collect())
                    .collect();
                let best = brute_idtp(&ok, 0, &mut vec![false; h.len()]);
                prop_assert_eq!(match_frame(g, h, 0.5).len(), best);
            }
        }
    }
}
