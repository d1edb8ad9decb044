//! Geometry of local embedding: where codes go, how they are added, how the
//! ground-truth map is built and how regions are read back from a predicted map.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::ImageTensor;
use crate::error::{LdhError, Result};

/// Bits carried by one full-size RGB secret per cover pixel.
pub const BITS_PER_SECRET: usize = 24;

/// Rejections tolerated by random placement before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Axis-aligned square `side x side` window at (`top`, `left`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl Region {
    pub fn new(top: usize, left: usize, side: usize) -> Self {
        Self { top, left, side }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.side > 0 && self.top + self.side <= height && self.left + self.side <= width
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.top < other.top + other.side
            && other.top < self.top + self.side
            && self.left < other.left + other.side
            && other.left < self.left + self.side
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.side).contains(&y)
            && (self.left..self.left + self.side).contains(&x)
    }

    pub fn area(&self) -> usize {
        self.side * self.side
    }

    /// Overlap area with another region.
    pub fn intersection(&self, other: &Region) -> usize {
        let h = (self.top + self.side)
            .min(other.top + other.side)
            .saturating_sub(self.top.max(other.top));
        let w = (self.left + self.side)
            .min(other.left + other.side)
            .saturating_sub(self.left.max(other.left));
        h * w
    }

    /// Grid cell `index` (row-major) of an `omega x omega` tiling.
    pub fn grid_cell(cover_side: usize, omega: usize, index: usize) -> Self {
        let side = cover_side / omega;
        Self::new((index / omega) * side, (index % omega) * side, side)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.top, self.left, self.side)
    }
}

impl FromStr for Region {
    type Err = LdhError;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| LdhError::Config(format!("bad region line {s:?}")))
            })
            .collect::<Result<_>>()?;
        match parts[..] {
            [top, left, side] => Ok(Self::new(top, left, side)),
            _ => Err(LdhError::Config(format!(
                "region line needs 'top left side': {s:?}"
            ))),
        }
    }
}

/// One region per line, `top left side`.
pub fn format_regions(regions: &[Region]) -> String {
    regions.iter().map(|r| format!("{r}\n")).collect()
}

pub fn parse_regions(text: &str) -> Result<Vec<Region>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

/// The compact residual produced by the hiding network, planar RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretCode {
    side: usize,
    data: Vec<f32>,
}

impl SecretCode {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return Err(LdhError::Shape(format!(
                "{} values for a {side}x{side}x3 code",
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            data: vec![0.0; 3 * side * side],
        }
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self {
            side,
            data: vec![value; 3 * side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }
}

/// Per-pixel map in `[0, 1]`: soft predictions or hard `{0, 1}` masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl LocationMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(LdhError::Shape(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(LdhError::Shape("map values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Hard map: 1 where the value exceeds `threshold`.
    pub fn binarize(&self, threshold: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    fn cell_mean(&self, r: &Region) -> f64 {
        let mut s = 0.0;
        for y in r.top..r.top + r.side {
            for x in r.left..r.left + r.side {
                s += f64::from(self.get(y, x));
            }
        }
        s / r.area() as f64
    }
}

/// How codes are placed in a cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    /// Uniform positions anywhere, resampled until disjoint.
    Random,
    /// Distinct cells of the `omega x omega` grid in random order.
    Grid,
}

/// Samples `n` pairwise-disjoint regions of side `cover_side / omega`.
pub fn sample_regions(
    n: usize,
    cover_side: usize,
    omega: usize,
    rng: &mut impl Rng,
    mode: PlacementMode,
) -> Result<Vec<Region>> {
    if n == 0 {
        return Err(LdhError::Config("at least one region is required".into()));
    }
    if omega == 0 || !cover_side.is_multiple_of(omega) {
        return Err(LdhError::Config(format!(
            "cover side {cover_side} not divisible by omega {omega}"
        )));
    }
    let side = cover_side / omega;
    match mode {
        PlacementMode::Grid => {
            if n > omega * omega {
                return Err(LdhError::Config(format!(
                    "grid placement holds at most {} regions, asked for {n}",
                    omega * omega
                )));
            }
            let mut cells: Vec<usize> = (0..omega * omega).collect();
            cells.shuffle(rng);
            Ok(cells[..n]
                .iter()
                .map(|&c| Region::grid_cell(cover_side, omega, c))
                .collect())
        }
        PlacementMode::Random => {
            let span = cover_side - side;
            let mut out: Vec<Region> = Vec::with_capacity(n);
            let mut rejections = 0;
            while out.len() < n {
                let r = Region::new(rng.random_range(0..=span), rng.random_range(0..=span), side);
                if out.iter().any(|o| o.overlaps(&r)) {
                    rejections += 1;
                    if rejections >= MAX_PLACEMENT_ATTEMPTS {
                        return Err(LdhError::Overcrowded {
                            wanted: n,
                            attempts: rejections,
                        });
                    }
                } else {
                    out.push(r);
                }
            }
            Ok(out)
        }
    }
}

/// Picks the `n` grid cells with the highest pixel variance (texture-rich
/// areas hide residuals best), sorted row-major.
pub fn texture_regions(cover: &ImageTensor, n: usize, omega: usize) -> Result<Vec<Region>> {
    let side = cover.height();
    if cover.width() != side || omega == 0 || !side.is_multiple_of(omega) {
        return Err(LdhError::Shape(
            "texture placement needs a square cover divisible by omega".into(),
        ));
    }
    if n == 0 || n > omega * omega {
        return Err(LdhError::Config(format!(
            "cannot place {n} regions in a {omega}x{omega} grid"
        )));
    }
    let mut scored: Vec<(f64, Region)> = (0..omega * omega)
        .map(|i| {
            let r = Region::grid_cell(side, omega, i);
            let mut sum = 0.0;
            let mut sq = 0.0;
            for c in 0..3 {
                for y in r.top..r.top + r.side {
                    for x in r.left..r.left + r.side {
                        let v = f64::from(cover.get(y, x, c));
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let count = (3 * r.area()) as f64;
            let mean = sum / count;
            (sq / count - mean * mean, r)
        })
        .collect();
    // Stable sort keeps row-major order among ties.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut picked: Vec<Region> = scored[..n].iter().map(|&(_, r)| r).collect();
    picked.sort();
    Ok(picked)
}

fn check_disjoint(regions: &[Region]) -> Result<()> {
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if a.overlaps(b) {
                return Err(LdhError::Overlap(format!("({a}) and ({b})")));
            }
        }
    }
    Ok(())
}

/// Adds `code` into `cover` over `region`, clamping the result to `[0, 1]`.
/// Pixels outside the region are copied bit for bit.
pub fn local_add(cover: &ImageTensor, code: &SecretCode, region: Region) -> Result<ImageTensor> {
    local_add_many(cover, &[(code, region)])
}

/// Embeds several codes into disjoint regions of one cover.
pub fn local_add_many(cover: &ImageTensor, codes: &[(&SecretCode, Region)]) -> Result<ImageTensor> {
    let (h, w) = (cover.height(), cover.width());
    let regions: Vec<Region> = codes.iter().map(|&(_, r)| r).collect();
    for &(code, r) in codes {
        if code.side() != r.side {
            return Err(LdhError::Shape(format!(
                "code side {} vs region side {}",
                code.side(),
                r.side
            )));
        }
        if !r.fits(h, w) {
            return Err(LdhError::OutOfBounds(format!("({r}) in {h}x{w}")));
        }
    }
    check_disjoint(&regions)?;
    let mut data = cover.data().to_vec();
    for &(code, r) in codes {
        for c in 0..3 {
            for y in 0..r.side {
                for x in 0..r.side {
                    let i = (c * h + r.top + y) * w + r.left + x;
                    data[i] = (data[i] + code.get(y, x, c)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(ImageTensor::from_clamped(h, w, data))
}

/// Hard map with ones exactly on the pixels of `regions`.
pub fn make_ground_truth_map(regions: &[Region], side: usize) -> Result<LocationMap> {
    check_disjoint(regions)?;
    let mut map = LocationMap::zeros(side, side);
    for r in regions {
        if !r.fits(side, side) {
            return Err(LdhError::OutOfBounds(format!("({r}) in {side}x{side}")));
        }
        for y in r.top..r.top + r.side {
            map.values[y * side + r.left..y * side + r.left + r.side].fill(1.0);
        }
    }
    Ok(map)
}

/// Grid-scan decision: a cell of the `omega x omega` grid is reported when its
/// mean map value exceeds `threshold`. Result is row-major.
pub fn extract_regions(map: &LocationMap, omega: usize, threshold: f32) -> Vec<Region> {
    let side = map.height();
    assert!(
        omega > 0 && side.is_multiple_of(omega) && map.width() == side,
        "map must be square and divisible by omega"
    );
    (0..omega * omega)
        .map(|i| Region::grid_cell(side, omega, i))
        .filter(|r| map.cell_mean(r) > f64::from(threshold))
        .collect()
}

/// The grid cell with the highest mean map value (used when nothing clears
/// the threshold but a crop is still required).
pub fn strongest_cell(map: &LocationMap, omega: usize) -> Region {
    let side = map.height();
    (0..omega * omega)
        .map(|i| Region::grid_cell(side, omega, i))
        .max_by(|a, b| map.cell_mean(a).total_cmp(&map.cell_mean(b)).then(b.cmp(a)))
        .expect("omega > 0")
}

/// Copies the pixels under `region`.
pub fn crop(stego: &ImageTensor, region: Region) -> Result<ImageTensor> {
    let (h, w) = (stego.height(), stego.width());
    if !region.fits(h, w) {
        return Err(LdhError::OutOfBounds(format!("({region}) in {h}x{w}")));
    }
    let s = region.side;
    let mut data = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        for y in 0..s {
            let start = (c * h + region.top + y) * w + region.left;
            data.extend_from_slice(&stego.data()[start..start + s]);
        }
    }
    Ok(ImageTensor::from_clamped(s, s, data))
}

/// Payload in bits per cover pixel for `n` embedded secrets.
pub fn embedding_rate_bpp(n: usize) -> usize {
    n * BITS_PER_SECRET
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(side: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(
            side,
            side,
            (0..3 * side * side).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn grid_sampling_covers_every_cell_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = sample_regions(16, 64, 4, &mut rng, PlacementMode::Grid).unwrap();
        r.sort();
        let want: Vec<Region> = (0..16).map(|i| Region::grid_cell(64, 4, i)).collect();
        assert_eq!(r, want);
        assert_eq!(embedding_rate_bpp(r.len()), 16 * 24);

        let mut q = sample_regions(4, 64, 2, &mut rng, PlacementMode::Grid).unwrap();
        q.sort();
        assert_eq!(
            q,
            vec![
                Region::new(0, 0, 32),
                Region::new(0, 32, 32),
                Region::new(32, 0, 32),
                Region::new(32, 32, 32)
            ]
        );
        assert!(sample_regions(5, 64, 2, &mut rng, PlacementMode::Grid).is_err());
    }

    #[test]
    fn random_sampling_respects_bounds_and_disjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let r = sample_regions(1, 64, 2, &mut rng, PlacementMode::Random).unwrap();
            assert_eq!(r.len(), 1);
            assert!(r[0].fits(64, 64) && r[0].side == 32);
        }
        let many = sample_regions(3, 64, 4, &mut rng, PlacementMode::Random).unwrap();
        check_disjoint(&many).unwrap();
        // Two 32x32 regions rarely fit disjointly at random in 33x33 slack.
        assert!(matches!(
            sample_regions(4, 64, 2, &mut rng, PlacementMode::Random),
            Err(LdhError::Overcrowded { .. })
        ));
    }

    #[test]
    fn local_add_arithmetic() {
        let cover = ImageTensor::filled(8, 8, 0.5);
        let r = Region::new(2, 4, 4);
        assert_eq!(local_add(&cover, &SecretCode::zeros(4), r).unwrap(), cover);
        let out = local_add(&cover, &SecretCode::filled(4, 0.2), r).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if r.contains(y, x) { 0.7 } else { 0.5 };
                assert!((out.get(y, x, 1) - want).abs() < 1e-6);
            }
        }
        let bright = ImageTensor::filled(8, 8, 0.95);
        let out = local_add(&bright, &SecretCode::filled(4, 0.2), r).unwrap();
        assert_eq!(out.get(3, 5, 0), 1.0);
        assert!(local_add(&cover, &SecretCode::zeros(4), Region::new(6, 0, 4)).is_err());
        assert!(local_add(&cover, &SecretCode::zeros(3), r).is_err());
    }

    #[test]
    fn ground_truth_maps() {
        assert_eq!(make_ground_truth_map(&[], 16).unwrap().ones(), 0);
        let m = make_ground_truth_map(&[Region::new(0, 32, 32)], 64).unwrap();
        assert_eq!(m.ones(), 1024);
        let quads: Vec<Region> = (0..4).map(|i| Region::grid_cell(64, 2, i)).collect();
        let full = make_ground_truth_map(&quads, 64).unwrap();
        assert_eq!(full.ones(), 64 * 64);
        assert!(make_ground_truth_map(&[Region::new(0, 0, 8), Region::new(4, 4, 8)], 16).is_err());
    }

    #[test]
    fn extraction_threshold_rule() {
        let uniform = LocationMap::new(8, 8, vec![0.4; 64]).unwrap();
        assert!(extract_regions(&uniform, 2, 0.5).is_empty());

        // Soft map: cell 2 at mean 0.9, others 0.1; brute force over cells.
        let mut vals = vec![0.1f32; 64];
        for y in 4..8 {
            for x in 0..4 {
                vals[y * 8 + x] = if (y + x) % 2 == 0 { 0.8 } else { 1.0 };
            }
        }
        let soft = LocationMap::new(8, 8, vals.clone()).unwrap();
        let mut brute = Vec::new();
        for cell in 0..4 {
            let (top, left) = ((cell / 2) * 4, (cell % 2) * 4);
            let mut s = 0.0;
            for y in top..top + 4 {
                for x in left..left + 4 {
                    s += f64::from(vals[y * 8 + x]);
                }
            }
            if s / 16.0 > 0.5 {
                brute.push(Region::new(top, left, 4));
            }
        }
        assert_eq!(brute, vec![Region::new(4, 0, 4)]);
        assert_eq!(extract_regions(&soft, 2, 0.5), brute);
        assert_eq!(strongest_cell(&soft, 2), Region::new(4, 0, 4));
    }

    #[test]
    fn crop_identity_and_commutation() {
        let c = noise(16, 3);
        assert_eq!(crop(&c, Region::new(0, 0, 16)).unwrap(), c);
        let r = Region::new(4, 8, 8);
        let code =
            SecretCode::new(8, (0..192).map(|i| (i as f32 / 192.0) - 0.5).collect()).unwrap();
        let lhs = crop(&local_add(&c, &code, r).unwrap(), r).unwrap();
        let base = crop(&c, r).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    let want = (base.get(y, x, ch) + code.get(y, x, ch)).clamp(0.0, 1.0);
                    assert_eq!(lhs.get(y, x, ch), want);
                }
            }
        }
        assert!(crop(&c, Region::new(10, 10, 8)).is_err());
    }

    #[test]
    fn texture_mode_prefers_busy_cells() {
        let mut cover = ImageTensor::filled(16, 16, 0.5);
        let busy = noise(8, 7);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    cover.set(8 + y, x, c, busy.get(y, x, c));
                }
            }
        }
        assert_eq!(
            texture_regions(&cover, 1, 2).unwrap(),
            vec![Region::new(8, 0, 8)]
        );
        assert_eq!(texture_regions(&cover, 4, 2).unwrap().len(), 4);
    }

    #[test]
    fn region_text_round_trip() {
        let rs = vec![Region::new(0, 32, 32), Region::new(32, 0, 32)];
        assert_eq!(parse_regions(&format_regions(&rs)).unwrap(), rs);
        assert!(parse_regions("1 2").is_err());
    }

    proptest::proptest! {
        #[test]
        fn local_add_never_touches_outside(seed in 0u64..1000, top in 0usize..9, left in 0usize..9, amp in -1.0f32..1.0) {
            let cover = noise(16, seed);
            let code = SecretCode::filled(8, amp);
            let r = Region::new(top, left, 8);
            let out = local_add(&cover, &code, r).unwrap();
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        if !r.contains(y, x) {
                            proptest::prop_assert_eq!(out.get(y, x, c).to_bits(), cover.get(y, x, c).to_bits());
                        }
                    }
                }
            }
        }

        #[test]
        fn extraction_inverts_ground_truth(mask in 0u32..65536) {
            let omega = 4;
            let regions: Vec<Region> = (0..16).filter(|i| mask >> i & 1 == 1).map(|i| Region::grid_cell(32, omega, i)).collect();
            let map = make_ground_truth_map(&regions, 32).unwrap();
            proptest::prop_assert_eq!(extract_regions(&map, omega, 0.5), regions);
        }
    }
}
