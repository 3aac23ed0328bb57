//! Grid mini-patch maps.
//!
//! Every view is cut into `L x L` grids; one `s x s` window is sampled from
//! each selected non-blank grid and the windows are spliced, in a seeded
//! order, into a map the size of a single view.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::ViewImage;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Grids per side, `L`.
    pub grids: usize,
    /// Mini-patch side, `s`.
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            grids: 16,
            patch: 32,
            height: 512,
            width: 512,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let (l, s, h, w) = (self.grids, self.patch, self.height, self.width);
        if l == 0 || s == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("zero-sized grid spec {self:?}")));
        }
        if h % l != 0 || w % l != 0 {
            return Err(Error::InvalidArgument(format!("{h}x{w} is not divisible into {l}x{l} grids")));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::InvalidArgument(format!("{h}x{w} is not tiled by {s}x{s} mini-patches")));
        }
        if s > h / l || s > w / l {
            return Err(Error::InvalidArgument(format!(
                "mini-patch side {s} exceeds the {}x{} grid",
                h / l,
                w / l
            )));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn slot_cols(&self) -> usize {
        self.width / self.patch
    }
}

/// Half-open pixel window of grid `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridWindow {
    pub i: usize,
    pub j: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// The `L^2` grids of an `height x width` image in raster order.
pub fn split_grids(height: usize, width: usize, l: usize) -> Result<Vec<GridWindow>> {
    if l == 0 || height % l != 0 || width % l != 0 {
        return Err(Error::InvalidArgument(format!("{height}x{width} is not divisible into {l}x{l} grids")));
    }
    let (gh, gw) = (height / l, width / l);
    Ok((0..l)
        .flat_map(|i| {
            (0..l).map(move |j| GridWindow {
                i,
                j,
                y0: i * gh,
                y1: (i + 1) * gh,
                x0: j * gw,
                x1: (j + 1) * gw,
            })
        })
        .collect())
}

/// True iff every pixel of the window is background.
pub fn is_blank(img: &ViewImage, win: &GridWindow) -> bool {
    (win.y0..win.y1).all(|y| (win.x0..win.x1).all(|x| img.is_background(y, x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSource {
    pub view: usize,
    pub i: usize,
    pub j: usize,
    /// Offset of the mini-patch inside its grid.
    pub off_y: usize,
    pub off_x: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotProvenance {
    /// Drawn without replacement from the candidate grids.
    Sampled(PatchSource),
    /// Resampled with replacement because candidates ran out.
    Fill(PatchSource),
}

impl SlotProvenance {
    pub fn source(&self) -> &PatchSource {
        match self {
            SlotProvenance::Sampled(s) | SlotProvenance::Fill(s) => s,
        }
    }

    pub fn is_fill(&self) -> bool {
        matches!(self, SlotProvenance::Fill(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniPatchMap {
    pub spec: GridSpec,
    pub image: ViewImage,
    /// One entry per slot, slots in raster order.
    pub provenance: Vec<SlotProvenance>,
}

impl MiniPatchMap {
    /// Top-left pixel of the source window of a slot.
    pub fn source_origin(&self, src: &PatchSource) -> (usize, usize) {
        let gh = self.spec.height / self.spec.grids;
        let gw = self.spec.width / self.spec.grids;
        (src.i * gh + src.off_y, src.j * gw + src.off_x)
    }

    pub fn provenance_csv(&self) -> Vec<u8> {
        let mut out = b"slot,row,col,view,i,j,off_y,off_x\n".to_vec();
        let cols = self.spec.slot_cols();
        for (slot, p) in self.provenance.iter().enumerate() {
            let (row, col) = (slot / cols, slot % cols);
            let line = match p {
                SlotProvenance::Sampled(s) => {
                    format!("{slot},{row},{col},{},{},{},{},{}\n", s.view, s.i, s.j, s.off_y, s.off_x)
                }
                SlotProvenance::Fill(_) => format!("{slot},{row},{col},FILL,,,,\n"),
            };
            out.extend_from_slice(line.as_bytes());
        }
        out
    }

    pub fn save(&self, png: &Path, provenance: &Path) -> Result<()> {
        self.image.save_png(png)?;
        let mut f = std::fs::File::create(provenance).map_err(|e| Error::io(provenance, e))?;
        f.write_all(&self.provenance_csv()).map_err(|e| Error::io(provenance, e))
    }
}

/// Builds the mini-patch map of `views`.
pub fn build_map(views: &[ViewImage], spec: &GridSpec, seed: u64) -> Result<MiniPatchMap> {
    spec.validate()?;
    if views.is_empty() {
        return Err(Error::Empty("no views".into()));
    }
    if let Some(v) = views.iter().find(|v| v.height != spec.height || v.width != spec.width) {
        return Err(Error::Shape(format!(
            "view is {}x{}, grid spec expects {}x{}",
            v.height, v.width, spec.height, spec.width
        )));
    }
    let windows = split_grids(spec.height, spec.width, spec.grids)?;
    let candidates: Vec<(usize, GridWindow)> = views
        .iter()
        .enumerate()
        .flat_map(|(v, img)| windows.iter().filter(|w| !is_blank(img, w)).map(move |w| (v, *w)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Degenerate("every grid of every view is background".into()));
    }

    let mut rng = seeded(seed);
    let slots = spec.slots();
    let (gh, gw) = (spec.height / spec.grids, spec.width / spec.grids);
    let sample = |rng: &mut crate::rng::Rng, (view, w): (usize, GridWindow)| PatchSource {
        view,
        i: w.i,
        j: w.j,
        off_y: rng.random_range(0..=gh - spec.patch),
        off_x: rng.random_range(0..=gw - spec.patch),
    };
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<SlotProvenance> = order
        .iter()
        .take(slots)
        .map(|&c| SlotProvenance::Sampled(sample(&mut rng, candidates[c])))
        .collect();
    while chosen.len() < slots {
        let c = rng.random_range(0..candidates.len());
        chosen.push(SlotProvenance::Fill(sample(&mut rng, candidates[c])));
    }
    chosen.shuffle(&mut rng);

    let mut image = ViewImage::blank(spec.width, spec.height);
    let cols = spec.slot_cols();
    let s = spec.patch;
    for (slot, p) in chosen.iter().enumerate() {
        let src = p.source();
        let img = &views[src.view];
        let (sy, sx) = (src.i * gh + src.off_y, src.j * gw + src.off_x);
        let (dy, dx) = ((slot / cols) * s, (slot % cols) * s);
        for r in 0..s {
            let from = 3 * ((sy + r) * img.width + sx);
            let to = 3 * ((dy + r) * spec.width + dx);
            image.rgb[to..to + 3 * s].copy_from_slice(&img.rgb[from..from + 3 * s]);
            let mf = (sy + r) * img.width + sx;
            let mt = (dy + r) * spec.width + dx;
            image.mask[mt..mt + s].copy_from_slice(&img.mask[mf..mf + s]);
        }
    }
    Ok(MiniPatchMap {
        spec: *spec,
        image,
        provenance: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Foreground everywhere, with pixel values encoding position and view.
    fn full_view(v: usize, h: usize, w: usize) -> ViewImage {
        let mut img = ViewImage::blank(w, h);
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                img.rgb[3 * k..3 * k + 3].copy_from_slice(&[(x % 251) as u8, (y % 241) as u8, (v * 37 + (x ^ y) % 7) as u8]);
                img.mask[k] = false;
            }
        }
        img
    }

    #[test]
    fn grid_tiling() {
        let g = split_grids(512, 512, 16).unwrap();
        assert_eq!(g.len(), 256);
        assert!(g.iter().all(|w| w.y1 - w.y0 == 32 && w.x1 - w.x0 == 32));
        let mut count = vec![0u8; 512 * 512];
        for w in &g {
            for y in w.y0..w.y1 {
                for x in w.x0..w.x1 {
                    count[y * 512 + x] += 1;
                }
            }
        }
        assert!(count.iter().all(|&c| c == 1));
        let one = split_grids(40, 24, 1).unwrap();
        assert_eq!(one, vec![GridWindow { i: 0, j: 0, y0: 0, y1: 40, x0: 0, x1: 24 }]);
        assert!(split_grids(30, 30, 4).is_err());
    }

    #[test]
    fn blank_rule_is_strict() {
        let mut img = ViewImage::blank(10, 10);
        let win = GridWindow { i: 0, j: 0, y0: 0, y1: 10, x0: 0, x1: 10 };
        assert!(is_blank(&img, &win));
        img.mask[57] = false;
        assert!(!is_blank(&img, &win));
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::default().validate().is_ok());
        let bad = GridSpec { patch: 48, ..GridSpec::default() };
        assert!(bad.validate().is_err());
        let bad = GridSpec { grids: 15, ..GridSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_coverage_uses_distinct_grids() {
        let spec = GridSpec { grids: 8, patch: 8, height: 64, width: 64 };
        let views: Vec<_> = (0..6).map(|v| full_view(v, 64, 64)).collect();
        let map = build_map(&views, &spec, 3).unwrap();
        assert_eq!(map.provenance.len(), 64);
        assert!(map.provenance.iter().all(|p| !p.is_fill()));
        let mut seen: Vec<_> = map.provenance.iter().map(|p| { let s = p.source(); (s.view, s.i, s.j) }).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn single_foreground_grid_fills_everything() {
        let spec = GridSpec { grids: 4, patch: 4, height: 16, width: 16 };
        let mut img = ViewImage::blank(16, 16);
        img.mask[5 * 16 + 9] = false;
        img.rgb[3 * (5 * 16 + 9)] = 7;
        let map = build_map(&[img], &spec, 1).unwrap();
        assert_eq!(map.provenance.len(), 16);
        assert_eq!(map.provenance.iter().filter(|p| !p.is_fill()).count(), 1);
        assert!(map.provenance.iter().all(|p| (p.source().i, p.source().j) == (1, 2)));
        // s equals the grid side, so every offset is zero
        assert!(map.provenance.iter().all(|p| p.source().off_y == 0 && p.source().off_x == 0));
    }

    #[test]
    fn pixels_copied_verbatim() {
        let spec = GridSpec { grids: 4, patch: 5, height: 40, width: 40 };
        let views: Vec<_> = (0..2).map(|v| full_view(v, 40, 40)).collect();
        let map = build_map(&views, &spec, 9).unwrap();
        let cols = spec.slot_cols();
        for (slot, p) in map.provenance.iter().enumerate() {
            let (sy, sx) = map.source_origin(p.source());
            let (dy, dx) = ((slot / cols) * 5, (slot % cols) * 5);
            for r in 0..5 {
                for c in 0..5 {
                    assert_eq!(map.image.pixel(dy + r, dx + c), views[p.source().view].pixel(sy + r, sx + c));
                }
            }
        }
    }

    #[test]
    fn no_candidates_is_an_error() {
        let spec = GridSpec { grids: 2, patch: 2, height: 4, width: 4 };
        assert!(matches!(build_map(&[ViewImage::blank(4, 4)], &spec, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn provenance_csv_format() {
        let spec = GridSpec { grids: 2, patch: 2, height: 4, width: 4 };
        let mut img = ViewImage::blank(4, 4);
        img.mask[0] = false;
        let map = build_map(&[img], &spec, 0).unwrap();
        let text = String::from_utf8(map.provenance_csv()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "slot,row,col,view,i,j,off_y,off_x");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines.iter().filter(|l| l.contains("FILL")).count(), 3);
        assert!(lines.iter().any(|l| l.ends_with(",0,0,0,0,0")));
    }
}
