//! Ternary prediction to instance label map.
//!
//! Connected components of the body class become instances, numbered in
//! raster order of their first pixel after dropping components smaller than
//! `min_instance_area`. With `recover_boundary`, each boundary pixel then
//! joins the instance owning the nearest body pixel (squared Euclidean
//! distance, lowest id on ties) within Chebyshev distance
//! `2 * boundary_width`; boundary pixels with no body pixel in range stay
//! background.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataio::InstanceLabelMap;
use crate::error::Error;
use crate::segmenter::{TernaryMask, BOUNDARY, BODY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self, Error> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!("connectivity must be 4 or 8, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub min_instance_area: usize,
    pub recover_boundary: bool,
    pub connectivity: Connectivity,
    /// Boundary width used when the ternary targets were built; recovery searches up to twice this.
    pub boundary_width: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            min_instance_area: 10,
            recover_boundary: true,
            connectivity: Connectivity::Eight,
            boundary_width: 2,
        }
    }
}

impl PostprocessConfig {
    /// Toy-scale defaults (2-pixel minimum area, 1-pixel boundaries).
    pub fn toy() -> Self {
        Self {
            min_instance_area: 2,
            boundary_width: 1,
            ..Self::default()
        }
    }
}

/// Body components as instances, before boundary recovery.
pub fn label_body_components(mask: &TernaryMask, cfg: &PostprocessConfig) -> InstanceLabelMap {
    let (h, w) = (mask.height(), mask.width());
    let mut comp = vec![0usize; h * w];
    let mut out = InstanceLabelMap::background(h, w);
    let mut next_comp = 0;
    let mut next_id = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.classes()[start] != BODY || comp[start] != 0 {
            continue;
        }
        next_comp += 1;
        comp[start] = next_comp;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in cfg.connectivity.offsets() {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if mask.classes()[j] == BODY && comp[j] == 0 {
                    comp[j] = next_comp;
                    queue.push_back(j);
                }
            }
        }
        if members.len() >= cfg.min_instance_area.max(1) {
            next_id += 1;
            for i in members {
                out.labels_mut()[i] = next_id;
            }
        }
    }
    out
}

/// Assigns each unlabeled boundary pixel of `mask` to the nearest labeled
/// body pixel within Chebyshev `radius`. Applying it to its own output
/// changes nothing.
pub fn recover_boundaries(mask: &TernaryMask, labels: &InstanceLabelMap, radius: usize) -> InstanceLabelMap {
    let (h, w) = (mask.height(), mask.width());
    let mut out = labels.clone();
    let seed = |y: usize, x: usize| {
        let id = labels.get(y, x);
        (mask.get(y, x) == BODY && id != 0).then_some(id)
    };
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != BOUNDARY || labels.get(y, x) != 0 {
                continue;
            }
            let mut best: Option<(usize, u32)> = None;
            for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    if let Some(id) = seed(yy, xx) {
                        let d = yy.abs_diff(y).pow(2) + xx.abs_diff(x).pow(2);
                        if best.is_none_or(|b| (d, id) < b) {
                            best = Some((d, id));
                        }
                    }
                }
            }
            if let Some((_, id)) = best {
                out.set(y, x, id);
            }
        }
    }
    out
}

pub fn ternary_to_instances(mask: &TernaryMask, cfg: &PostprocessConfig) -> InstanceLabelMap {
    let bodies = label_body_components(mask, cfg);
    if cfg.recover_boundary {
        recover_boundaries(mask, &bodies, 2 * cfg.boundary_width)
    } else {
        bodies
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::BACKGROUND;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> TernaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let v = rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect();
        TernaryMask::new(h, w, v).unwrap()
    }

    fn cfg(min_area: usize, conn: Connectivity) -> PostprocessConfig {
        PostprocessConfig {
            min_instance_area: min_area,
            connectivity: conn,
            ..Default::default()
        }
    }

    /// Recursive flood fill used as an independent component oracle:
    /// returns the component index of every body pixel (None elsewhere).
    fn flood_oracle(m: &TernaryMask, conn: Connectivity) -> Vec<Option<usize>> {
        let (h, w) = (m.height(), m.width());
        let mut out = vec![None; h * w];
        fn fill(m: &TernaryMask, out: &mut [Option<usize>], y: isize, x: isize, c: usize, diag: bool) {
            let (h, w) = (m.height() as isize, m.width() as isize);
            if y < 0 || x < 0 || y >= h || x >= w {
                return;
            }
            let i = (y * w + x) as usize;
            if m.classes()[i] != BODY || out[i].is_some() {
                return;
            }
            out[i] = Some(c);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dy != 0 || dx != 0) && (diag || dy == 0 || dx == 0) {
                        fill(m, out, y + dy, x + dx, c, diag);
                    }
                }
            }
        }
        let mut c = 0;
        for i in 0..h * w {
            if m.classes()[i] == BODY && out[i].is_none() {
                fill(m, &mut out, (i / w) as isize, (i % w) as isize, c, conn == Connectivity::Eight);
                c += 1;
            }
        }
        out
    }

    #[test]
    fn all_background_gives_empty_map() {
        let out = ternary_to_instances(&TernaryMask::background(5, 5), &PostprocessConfig::default());
        assert_eq!(out.instance_count(), 0);
    }

    #[test]
    fn blobs_split_by_boundary_get_distinct_ids() {
        let m = mask(&["1112111", "1112111", "1112111"]);
        let out = ternary_to_instances(
            &m,
            &PostprocessConfig {
                recover_boundary: false,
                ..cfg(1, Connectivity::Eight)
            },
        );
        assert_eq!(out.get(0, 0), 1);
        assert_eq!(out.get(0, 6), 2);
        assert_eq!(out.get(0, 3), 0);
    }

    #[test]
    fn small_blob_is_discarded() {
        let m = mask(&["00000", "01110", "01100", "00000"]);
        assert_eq!(ternary_to_instances(&m, &cfg(10, Connectivity::Eight)).instance_count(), 0);
        assert_eq!(ternary_to_instances(&m, &cfg(5, Connectivity::Eight)).instance_count(), 1);
    }

    #[test]
    fn diagonal_contact_depends_on_connectivity() {
        let m = mask(&["10", "01"]);
        assert_eq!(label_body_components(&m, &cfg(1, Connectivity::Four)).instance_count(), 2);
        assert_eq!(label_body_components(&m, &cfg(1, Connectivity::Eight)).instance_count(), 1);
    }

    #[test]
    fn boundary_goes_to_nearest_then_lowest_id() {
        // Boundary pixel at column 2 is equidistant from both bodies.
        let m = mask(&["11211"]);
        let out = ternary_to_instances(&m, &cfg(1, Connectivity::Eight));
        assert_eq!(out.labels(), &[1, 1, 1, 2, 2]);
        let m = mask(&["112211"]);
        let out = ternary_to_instances(&m, &cfg(1, Connectivity::Eight));
        assert_eq!(out.labels(), &[1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn far_boundary_stays_background() {
        let m = mask(&["1222222"]);
        let c = PostprocessConfig {
            boundary_width: 1,
            ..cfg(1, Connectivity::Eight)
        };
        assert_eq!(ternary_to_instances(&m, &c).labels(), &[1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn connectivity_round_trips_as_integer() {
        let c: PostprocessConfig = toml::from_str("connectivity = 4").unwrap();
        assert_eq!(c.connectivity, Connectivity::Four);
        assert!(toml::from_str::<PostprocessConfig>("connectivity = 6").is_err());
        assert!(toml::to_string(&c).unwrap().contains("connectivity = 4"));
    }

    fn arb_mask() -> impl Strategy<Value = TernaryMask> {
        (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![Just(BACKGROUND), Just(BODY), Just(BOUNDARY)], h * w)
                .prop_map(move |v| TernaryMask::new(h, w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn components_match_flood_fill(m in arb_mask(), eight in any::<bool>()) {
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let ours = label_body_components(&m, &cfg(1, conn));
            let oracle = flood_oracle(&m, conn);
            // Same partition: two body pixels share an id iff they share an oracle component.
            let n = m.height() * m.width();
            for i in 0..n {
                prop_assert_eq!(ours.labels()[i] != 0, oracle[i].is_some());
                for j in 0..n {
                    if oracle[i].is_some() && oracle[j].is_some() {
                        prop_assert_eq!(ours.labels()[i] == ours.labels()[j], oracle[i] == oracle[j]);
                    }
                }
            }
            // Ids follow raster order of first pixels.
            let mut firsts = Vec::new();
            for &id in ours.labels() {
                if id != 0 && !firsts.contains(&id) {
                    firsts.push(id);
                }
            }
            prop_assert_eq!(firsts, (1..=ours.instance_count() as u32).collect::<Vec<_>>());
        }

        #[test]
        fn recovery_is_idempotent_and_deterministic(m in arb_mask(), width in 1usize..3) {
            let c = PostprocessConfig { boundary_width: width, ..cfg(2, Connectivity::Eight) };
            let once = ternary_to_instances(&m, &c);
            prop_assert_eq!(&once, &ternary_to_instances(&m, &c));
            prop_assert_eq!(&recover_boundaries(&m, &once, 2 * width), &once);
        }
    }
}
