//! Slide-level descriptors computed from a decoded tissue map: the normalized
//! class histogram and statistics of tumor clusters, after removal of
//! implausibly small clusters. Also fragment splitting, lumen relabeling of
//! reference masks and worst-grade aggregation.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, RgbImage, TissueClass, IGNORE, NUM_TISSUE_CLASSES};

pub const MIN_TUMOR_CLUSTER_AREA: f64 = 30.0;
pub const FRAGMENT_MIN_PIXELS: usize = 1000;
pub const FEATURE_DIM: usize = NUM_TISSUE_CLASSES + 4;
/// Channel-sum threshold for lumen: mean over the three channels strictly above 240.
const LUMEN_CHANNEL_SUM: u32 = 3 * 240;

/// Slide risk grade, ordered by increasing clinical relevance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RiskCategory {
    Other = 0,
    Hyperplastic = 1,
    LowGradeDysplasia = 2,
    HighGradeDysplasiaTumor = 3,
}

impl RiskCategory {
    pub const ALL: [RiskCategory; 4] = [
        RiskCategory::Other,
        RiskCategory::Hyperplastic,
        RiskCategory::LowGradeDysplasia,
        RiskCategory::HighGradeDysplasiaTumor,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskCategory::Other => "other",
            RiskCategory::Hyperplastic => "hyperplastic",
            RiskCategory::LowGradeDysplasia => "low-grade dysplasia",
            RiskCategory::HighGradeDysplasiaTumor => "HGD/tumor",
        }
    }

    /// Short token used in CSV files.
    pub fn token(self) -> &'static str {
        match self {
            RiskCategory::Other => "other",
            RiskCategory::Hyperplastic => "hyperplastic",
            RiskCategory::LowGradeDysplasia => "lgd",
            RiskCategory::HighGradeDysplasiaTumor => "hgd",
        }
    }
}

impl fmt::Display for RiskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for RiskCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Self::from_index(i).ok_or_else(|| Error::InvalidInput(format!("grade index {i}")));
        }
        Self::ALL
            .into_iter()
            .find(|g| g.token().eq_ignore_ascii_case(s) || g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown grade {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_neighbors(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::InvalidParameter(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn neighbors(self) -> u8 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub class: u8,
    /// Flat pixel indices in raster order.
    pub pixels: Vec<usize>,
    pub bbox: BoundingBox,
}

impl Cluster {
    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn area(&self, pixel_area: f64) -> f64 {
        self.pixels.len() as f64 * pixel_area
    }
}

fn neighbors(
    index: usize,
    height: usize,
    width: usize,
    offsets: &'static [(isize, isize)],
) -> impl Iterator<Item = usize> {
    let (r, c) = ((index / width) as isize, (index % width) as isize);
    offsets.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r + dr, c + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width).then(|| nr as usize * width + nc as usize)
    })
}

/// Maximal connected sets of pixels satisfying `member`, in raster order of
/// their first pixel.
fn components_where(map: &LabelMap, connectivity: Connectivity, member: impl Fn(u8) -> bool) -> Vec<Vec<usize>> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; map.pixels()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..map.pixels() {
        if seen[start] || !member(map.data[start]) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            for q in neighbors(p, h, w, connectivity.offsets()) {
                if !seen[q] && member(map.data[q]) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push(pixels);
    }
    out
}

fn bounding_box(pixels: &[usize], width: usize) -> BoundingBox {
    let mut b = BoundingBox { min_row: usize::MAX, min_col: usize::MAX, max_row: 0, max_col: 0 };
    for &p in pixels {
        let (r, c) = (p / width, p % width);
        b.min_row = b.min_row.min(r);
        b.min_col = b.min_col.min(c);
        b.max_row = b.max_row.max(r);
        b.max_col = b.max_col.max(c);
    }
    b
}

/// Connected clusters of `target` pixels, ordered by (min row, min col) of
/// their bounding boxes.
pub fn connected_components(map: &LabelMap, target: TissueClass, connectivity: Connectivity) -> Vec<Cluster> {
    let class = target.label();
    let mut clusters: Vec<Cluster> = components_where(map, connectivity, |l| l == class)
        .into_iter()
        .map(|pixels| Cluster { class, bbox: bounding_box(&pixels, map.width), pixels })
        .collect();
    clusters.sort_by_key(|c| (c.bbox.min_row, c.bbox.min_col));
    clusters
}

/// Keeps clusters with area `>= min_area` and relabels the removed ones in
/// `map`. Each removed cluster takes the majority class among the pixels
/// 8-adjacent to it (ignoring unannotated pixels, background and its own
/// class), as seen in the map before any relabeling. Ties and clusters with
/// no voting neighbor go to stroma lamina propria.
pub fn filter_small_clusters(
    map: &mut LabelMap,
    clusters: Vec<Cluster>,
    min_area: f64,
    pixel_area: f64,
) -> Result<Vec<Cluster>> {
    if !(pixel_area > 0.0 && pixel_area.is_finite()) {
        return Err(Error::InvalidParameter(format!("pixel area must be > 0, got {pixel_area}")));
    }
    let (kept, removed): (Vec<Cluster>, Vec<Cluster>) =
        clusters.into_iter().partition(|c| c.area(pixel_area) >= min_area);
    let original = map.clone();
    let mut mark = vec![usize::MAX; map.pixels()];
    for (ci, cluster) in removed.iter().enumerate() {
        for &p in &cluster.pixels {
            mark[p] = ci;
        }
    }
    let mut counted = vec![usize::MAX; map.pixels()];
    for (ci, cluster) in removed.iter().enumerate() {
        let mut votes = [0usize; 256];
        for &p in &cluster.pixels {
            for q in neighbors(p, map.height, map.width, Connectivity::Eight.offsets()) {
                if mark[q] == ci || counted[q] == ci {
                    continue;
                }
                counted[q] = ci;
                let l = original.data[q];
                if l != IGNORE && l != cluster.class && l != TissueClass::Background.label() {
                    votes[usize::from(l)] += 1;
                }
            }
        }
        let best = *votes.iter().max().unwrap();
        let winners: Vec<usize> = (0..256).filter(|&l| best > 0 && votes[l] == best).collect();
        let label = match winners[..] {
            [single] => single as u8,
            _ => TissueClass::StromaLaminaPropria.label(),
        };
        for &p in &cluster.pixels {
            map.data[p] = label;
        }
    }
    Ok(kept)
}

/// Fraction of annotated pixels in each tissue class.
pub fn slide_histogram(map: &LabelMap) -> Result<[f64; NUM_TISSUE_CLASSES]> {
    map.validate(NUM_TISSUE_CLASSES)?;
    let mut counts = [0u64; NUM_TISSUE_CLASSES];
    for &l in map.data.iter().filter(|&&l| l != IGNORE) {
        counts[usize::from(l)] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("map has no annotated pixels".into()));
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideFeatureVector {
    pub histogram: [f64; NUM_TISSUE_CLASSES],
    pub tumor_cluster_count: usize,
    pub tumor_cluster_mean_area: f64,
    pub tumor_cluster_min_area: f64,
    pub tumor_cluster_max_area: f64,
}

impl SlideFeatureVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.histogram.to_vec();
        v.extend([
            self.tumor_cluster_count as f64,
            self.tumor_cluster_mean_area,
            self.tumor_cluster_min_area,
            self.tumor_cluster_max_area,
        ]);
        v
    }
}

/// Histogram and tumor-cluster statistics after small tumor clusters have
/// been removed and relabeled. Areas are in µm².
pub fn extract_feature_vector(
    map: &LabelMap,
    pixel_area: f64,
    connectivity: Connectivity,
) -> Result<SlideFeatureVector> {
    map.validate(NUM_TISSUE_CLASSES)?;
    let mut working = map.clone();
    let clusters = connected_components(&working, TissueClass::HighGradeDysplasiaTumor, connectivity);
    let kept = filter_small_clusters(&mut working, clusters, MIN_TUMOR_CLUSTER_AREA, pixel_area)?;
    let histogram = slide_histogram(&working)?;
    let areas: Vec<f64> = kept.iter().map(|c| c.area(pixel_area)).collect();
    let (mean, min, max) = if areas.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            areas.iter().sum::<f64>() / areas.len() as f64,
            areas.iter().copied().fold(f64::INFINITY, f64::min),
            areas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    Ok(SlideFeatureVector {
        histogram,
        tumor_cluster_count: kept.len(),
        tumor_cluster_mean_area: mean,
        tumor_cluster_min_area: min,
        tumor_cluster_max_area: max,
    })
}

/// One connected piece of tissue.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub pixels: Vec<usize>,
    pub bbox: BoundingBox,
}

impl Fragment {
    /// The fragment cropped to its bounding box; pixels outside it are unannotated.
    pub fn crop(&self, map: &LabelMap) -> LabelMap {
        let b = self.bbox;
        let (h, w) = (b.max_row - b.min_row + 1, b.max_col - b.min_col + 1);
        let mut out = LabelMap::filled(h, w, IGNORE);
        for &p in &self.pixels {
            let (r, c) = (p / map.width, p % map.width);
            out.set(r - b.min_row, c - b.min_col, map.data[p]);
        }
        out
    }
}

/// 8-connected tissue fragments (non-background, annotated pixels) of at
/// least [`FRAGMENT_MIN_PIXELS`] pixels.
pub fn split_fragments(map: &LabelMap) -> Vec<Fragment> {
    split_fragments_with(map, FRAGMENT_MIN_PIXELS)
}

pub fn split_fragments_with(map: &LabelMap, min_pixels: usize) -> Vec<Fragment> {
    let background = TissueClass::Background.label();
    let mut frags: Vec<Fragment> = components_where(map, Connectivity::Eight, |l| l != background && l != IGNORE)
        .into_iter()
        .filter(|p| p.len() >= min_pixels)
        .map(|pixels| Fragment { bbox: bounding_box(&pixels, map.width), pixels })
        .collect();
    frags.sort_by_key(|f| (f.bbox.min_row, f.bbox.min_col));
    frags
}

/// Sets pixels whose mean 8-bit channel value exceeds 240 to background.
pub fn relabel_lumen(rgb: &RgbImage, reference: &LabelMap) -> Result<LabelMap> {
    if (rgb.height, rgb.width) != (reference.height, reference.width) {
        return Err(Error::shape("rgb vs reference", (reference.height, reference.width), (rgb.height, rgb.width)));
    }
    let bytes = rgb.to_u8();
    let mut out = reference.clone();
    for (label, px) in out.data.iter_mut().zip(bytes.chunks_exact(3)) {
        let sum: u32 = px.iter().map(|&b| u32::from(b)).sum();
        if sum > LUMEN_CHANNEL_SUM {
            *label = TissueClass::Background.label();
        }
    }
    Ok(out)
}

/// Highest-risk grade in the list.
pub fn worst_grade(grades: &[RiskCategory]) -> Result<RiskCategory> {
    grades.iter().copied().max().ok_or_else(|| Error::EmptyInput("no grades to aggregate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: u8 = 2;
    const S: u8 = 5;

    fn grid(rows: &[&[u8]]) -> LabelMap {
        let w = rows[0].len();
        LabelMap::new(rows.len(), w, rows.concat()).unwrap()
    }

    fn block(h: usize, w: usize, fill: u8, rect: (usize, usize, usize, usize), label: u8) -> LabelMap {
        let mut m = LabelMap::filled(h, w, fill);
        for r in rect.0..rect.0 + rect.2 {
            for c in rect.1..rect.1 + rect.3 {
                m.set(r, c, label);
            }
        }
        m
    }

    #[test]
    fn components_basic() {
        let m = LabelMap::filled(3, 3, S);
        assert!(connected_components(&m, TissueClass::HighGradeDysplasiaTumor, Connectivity::Four).is_empty());
        let m = grid(&[&[T, S], &[S, T]]);
        let tumor = TissueClass::HighGradeDysplasiaTumor;
        assert_eq!(connected_components(&m, tumor, Connectivity::Four).len(), 2);
        assert_eq!(connected_components(&m, tumor, Connectivity::Eight).len(), 1);
        let m = LabelMap::filled(3, 3, T);
        let cs = connected_components(&m, tumor, Connectivity::Four);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].pixel_count(), 9);
    }

    #[test]
    fn components_are_ordered_by_bbox_corner() {
        // the second cluster starts on row 0 further right but extends left below
        let m = grid(&[&[T, S, S, T], &[S, S, S, S], &[T, T, S, S]]);
        let cs = connected_components(&m, TissueClass::HighGradeDysplasiaTumor, Connectivity::Four);
        let corners: Vec<_> = cs.iter().map(|c| (c.bbox.min_row, c.bbox.min_col)).collect();
        assert_eq!(corners, vec![(0, 0), (0, 3), (2, 0)]);
    }

    #[test]
    fn thirty_square_micron_boundary() {
        for (n, area, kept) in [(29, 1.0, false), (30, 1.0, true), (10, 4.0, true)] {
            let mut m = block(10, 40, S, (2, 0, 1, n), T);
            let cs = connected_components(&m, TissueClass::HighGradeDysplasiaTumor, Connectivity::Four);
            let out = filter_small_clusters(&mut m, cs, MIN_TUMOR_CLUSTER_AREA, area).unwrap();
            assert_eq!(out.len() == 1, kept, "n={n} area={area}");
            assert_eq!(m.data.contains(&T), kept);
        }
    }

    #[test]
    fn removed_cluster_takes_majority_neighbor() {
        // surrounded by mucus, with submucosal stroma far away in column 0
        let mut m = block(5, 5, 6, (0, 0, 5, 1), 3);
        m.set(2, 2, T);
        let cs = connected_components(&m, TissueClass::HighGradeDysplasiaTumor, Connectivity::Four);
        filter_small_clusters(&mut m, cs, 30.0, 1.0).unwrap();
        assert_eq!(m.get(2, 2), 6);
        // tie between two classes falls back to stroma lamina propria
        let mut m = grid(&[&[1, 1, 0], &[1, T, 0], &[1, 0, 0]]);
        let cs = connected_components(&m, TissueClass::HighGradeDysplasiaTumor, Connectivity::Four);
        filter_small_clusters(&mut m, cs, 30.0, 1.0).unwrap();
        assert_eq!(m.get(1, 1), S);
        let mut m = LabelMap::filled(1, 1, T);
        let cs = connected_components(&m, TissueClass::HighGradeDysplasiaTumor, Connectivity::Four);
        filter_small_clusters(&mut m, cs, 30.0, 1.0).unwrap();
        assert_eq!(m.data, vec![S]);
    }

    #[test]
    fn invalid_pixel_area() {
        let mut m = LabelMap::filled(1, 1, T);
        assert!(filter_small_clusters(&mut m, vec![], 30.0, 0.0).is_err());
    }

    #[test]
    fn histogram_cases() {
        let h = slide_histogram(&grid(&[&[0, 0, 3, 5]])).unwrap();
        assert_eq!((h[0], h[3], h[5]), (0.5, 0.25, 0.25));
        assert_eq!(h.iter().sum::<f64>(), 1.0);
        assert_eq!(slide_histogram(&LabelMap::filled(4, 4, 2)).unwrap()[2], 1.0);
        assert!(matches!(slide_histogram(&LabelMap::filled(2, 2, IGNORE)), Err(Error::EmptyInput(_))));
        let h = slide_histogram(&grid(&[&[0, IGNORE]])).unwrap();
        assert_eq!(h[0], 1.0);
    }

    #[test]
    fn feature_vector_cases() {
        let mut m = block(40, 40, S, (0, 0, 4, 10), T);
        for r in 20..26 {
            for c in 0..10 {
                m.set(r, c, T);
            }
        }
        let f = extract_feature_vector(&m, 1.0, Connectivity::Four).unwrap();
        assert_eq!(f.tumor_cluster_count, 2);
        assert_eq!((f.tumor_cluster_mean_area, f.tumor_cluster_min_area, f.tumor_cluster_max_area), (50.0, 40.0, 60.0));
        assert_eq!(f.to_vec().len(), FEATURE_DIM);

        let f = extract_feature_vector(&LabelMap::filled(8, 8, S), 1.0, Connectivity::Four).unwrap();
        assert_eq!(f.tumor_cluster_count, 0);
        assert_eq!(f.tumor_cluster_max_area, 0.0);

        let m = block(20, 20, S, (5, 5, 2, 5), T);
        let f = extract_feature_vector(&m, 1.0, Connectivity::Four).unwrap();
        assert_eq!(f.tumor_cluster_count, 0);
        assert_eq!(f.histogram[T as usize], 0.0);
        assert_eq!(f.histogram[S as usize], 1.0);
    }

    #[test]
    fn fragments() {
        let mut m = LabelMap::filled(100, 200, 13);
        for r in 10..60 {
            for c in 0..100 {
                m.set(r, c, 3);
                m.set(r, c + 100, 5);
            }
        }
        // columns 99 and 100 touch, so cut a gap
        for r in 0..100 {
            m.set(r, 100, 13);
        }
        let f = split_fragments(&m);
        assert_eq!(f.len(), 2);
        assert!(f[0].bbox.min_col < f[1].bbox.min_col);
        assert_eq!(f[0].crop(&m).annotated(), 5000);

        assert!(split_fragments(&LabelMap::filled(50, 50, 13)).is_empty());
        let small = block(50, 50, 13, (0, 0, 20, 25), 3);
        assert!(split_fragments(&small).is_empty());
    }

    #[test]
    fn lumen() {
        let to_f = |v: u8| f32::from(v) / 255.0;
        let img = RgbImage::new(1, 3, [250, 250, 250, 240, 240, 240, 0, 0, 0].map(to_f).to_vec()).unwrap();
        let r = relabel_lumen(&img, &grid(&[&[0, 0, 0]])).unwrap();
        assert_eq!(r.data, vec![13, 0, 0]);
        assert!(relabel_lumen(&img, &grid(&[&[0, 0]])).is_err());
    }

    #[test]
    fn worst_grade_cases() {
        use RiskCategory::*;
        assert_eq!(worst_grade(&[LowGradeDysplasia, Hyperplastic]).unwrap(), LowGradeDysplasia);
        assert_eq!(worst_grade(&[Other]).unwrap(), Other);
        assert_eq!(worst_grade(&[HighGradeDysplasiaTumor, Other, LowGradeDysplasia]).unwrap(), HighGradeDysplasiaTumor);
        assert!(worst_grade(&[]).is_err());
    }

    #[test]
    fn grade_parsing() {
        for g in RiskCategory::ALL {
            assert_eq!(g.token().parse::<RiskCategory>().unwrap(), g);
            assert_eq!(g.index().to_string().parse::<RiskCategory>().unwrap(), g);
        }
        assert!("severe".parse::<RiskCategory>().is_err());
    }

    fn grade() -> impl Strategy<Value = RiskCategory> {
        (0usize..4).prop_map(|i| RiskCategory::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn worst_grade_properties(gs in proptest::collection::vec(grade(), 1..10), extra in grade()) {
            let w = worst_grade(&gs).unwrap();
            prop_assert_eq!(worst_grade(&[w, w]).unwrap(), w);
            let mut rev = gs.clone();
            rev.reverse();
            prop_assert_eq!(worst_grade(&rev).unwrap(), w);
            let mut more = gs.clone();
            more.push(extra);
            prop_assert!(worst_grade(&more).unwrap() >= w);
        }

        #[test]
        fn translation_leaves_tissue_features_unchanged(
            cells in proptest::collection::vec(prop_oneof![Just(2u8), Just(5u8), Just(0u8)], 16 * 16),
            dr in 0usize..8, dc in 0usize..8,
        ) {
            let m = LabelMap::new(16, 16, cells).unwrap();
            let mut padded = LabelMap::filled(32, 32, 13);
            for r in 0..16 {
                for c in 0..16 {
                    padded.set(r + dr, c + dc, m.get(r, c));
                }
            }
            let a = extract_feature_vector(&m, 1.0, Connectivity::Four).unwrap();
            let b = extract_feature_vector(&padded, 1.0, Connectivity::Four).unwrap();
            prop_assert_eq!(a.tumor_cluster_count, b.tumor_cluster_count);
            prop_assert_eq!(a.tumor_cluster_max_area, b.tumor_cluster_max_area);
            // histograms agree up to the background bin once renormalized to tissue
            let scale = 256.0 / (32.0 * 32.0);
            for k in 0..13 {
                prop_assert!((a.histogram[k] * scale - b.histogram[k]).abs() < 1e-12);
            }
        }
    }
}
