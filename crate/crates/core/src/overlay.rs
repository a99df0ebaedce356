//! Heatmap overlays: the affordance map is upsampled to the image size,
//! colored and alpha-blended on top. The raw map goes to a 16-bit sidecar.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::head::AffordanceMap;
use crate::imaging::{GrayMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Jet,
    Turbo,
    Viridis,
    Inferno,
    Gray,
}

impl Colormap {
    pub const ALL: [Colormap; 5] = [
        Colormap::Jet,
        Colormap::Turbo,
        Colormap::Viridis,
        Colormap::Inferno,
        Colormap::Gray,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Colormap::Jet => "jet",
            Colormap::Turbo => "turbo",
            Colormap::Viridis => "viridis",
            Colormap::Inferno => "inferno",
            Colormap::Gray => "gray",
        }
    }

    /// Color for `t` in `[0, 1]` (clamped), channels in `[0, 1]`.
    pub fn color(self, t: f64) -> [f64; 3] {
        let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
        let from = |c: colorous::Color| [c.r as f64 / 255.0, c.g as f64 / 255.0, c.b as f64 / 255.0];
        match self {
            Colormap::Jet => jet(t),
            Colormap::Turbo => from(colorous::TURBO.eval_continuous(t)),
            Colormap::Viridis => from(colorous::VIRIDIS.eval_continuous(t)),
            Colormap::Inferno => from(colorous::INFERNO.eval_continuous(t)),
            Colormap::Gray => [t, t, t],
        }
    }
}

// classic piecewise-linear jet; colorous doesn't ship one
fn jet(t: f64) -> [f64; 3] {
    let ch = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Colormap::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<_> = Colormap::ALL.iter().map(|c| c.as_str()).collect();
                Error::Validation(format!("unknown colormap {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub colormap: Colormap,
    pub alpha: f64,
    pub output: PathBuf,
}

impl OverlaySpec {
    pub fn new(colormap: Colormap, alpha: f64, output: impl Into<PathBuf>) -> Result<Self> {
        let spec = OverlaySpec {
            colormap,
            alpha,
            output: output.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("overlay alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// `out.png` -> `out_map.png`.
    pub fn sidecar_path(&self) -> PathBuf {
        let stem = self.output.file_stem().and_then(|s| s.to_str()).unwrap_or("overlay");
        self.output.with_file_name(format!("{stem}_map.png"))
    }
}

#[derive(Debug, Clone)]
pub struct OverlayOutput {
    pub image: RgbImage,
    pub overlay_path: PathBuf,
    pub sidecar_path: PathBuf,
}

/// Blends without touching disk. The map is bilinearly upsampled to the
/// image dimensions.
pub fn blend(image: &RgbImage, map: &AffordanceMap, colormap: Colormap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("overlay alpha must lie in [0, 1], got {alpha}")));
    }
    let gray = GrayMap::new(map.width, map.height, map.values.clone())?;
    let up = gray.resize(image.width, image.height);
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let src = image.pixel(x, y);
            let c = colormap.color(up.at(x, y));
            out.put(
                x,
                y,
                [
                    (1.0 - alpha) * src[0] + alpha * c[0],
                    (1.0 - alpha) * src[1] + alpha * c[1],
                    (1.0 - alpha) * src[2] + alpha * c[2],
                ],
            );
        }
    }
    Ok(out)
}

/// Writes the overlay PNG and the raw-map 16-bit sidecar next to it.
pub fn render_overlay(image: &RgbImage, map: &AffordanceMap, spec: &OverlaySpec) -> Result<OverlayOutput> {
    spec.validate()?;
    let blended = blend(image, map, spec.colormap, spec.alpha)?;
    if let Some(dir) = spec.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    blended.save_png(&spec.output)?;
    let sidecar = spec.sidecar_path();
    write_sidecar(map, &sidecar)?;
    Ok(OverlayOutput {
        image: blended,
        overlay_path: spec.output.clone(),
        sidecar_path: sidecar,
    })
}

/// Raw map at native resolution, 16-bit.
pub fn write_sidecar(map: &AffordanceMap, path: &Path) -> Result<()> {
    GrayMap::new(map.width, map.height, map.values.clone())?.save_png16(path)
}

pub fn read_sidecar(path: &Path) -> Result<AffordanceMap> {
    let g = GrayMap::load(path)?;
    Ok(AffordanceMap {
        height: g.height,
        width: g.width,
        values: g.data,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, side: usize) -> AffordanceMap {
        AffordanceMap {
            height: side,
            width: side,
            values,
            degenerate: false,
        }
    }

    fn image(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [x as f64 / w as f64, y as f64 / h as f64, 0.3]);
            }
        }
        img
    }

    #[test]
    fn zero_alpha_keeps_image() {
        let img = image(17, 11);
        let m = map((0..9).map(|v| v as f64 / 8.0).collect(), 3);
        let out = blend(&img, &m, Colormap::Jet, 0.0).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn full_alpha_constant_map_is_floor_color() {
        let img = image(8, 8);
        let m = map(vec![0.0; 16], 4);
        for cm in Colormap::ALL {
            let out = blend(&img, &m, cm, 1.0).unwrap();
            let floor = cm.color(0.0);
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.pixel(x, y), floor, "{cm}");
                }
            }
        }
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    }

    #[test]
    fn alpha_outside_range_rejected() {
        assert!(OverlaySpec::new(Colormap::Gray, 1.5, "x.png").unwrap_err().is_validation());
        assert!(OverlaySpec::new(Colormap::Gray, -0.1, "x.png").is_err());
    }

    #[test]
    fn colormap_names_round_trip() {
        for cm in Colormap::ALL {
            assert_eq!(cm.as_str().parse::<Colormap>().unwrap(), cm);
        }
        assert!("rainbow".parse::<Colormap>().is_err());
    }

    #[test]
    fn sidecar_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..49).map(|i| ((i * 37) % 49) as f64 / 48.0).collect();
        let m = map(values.clone(), 7);
        let spec = OverlaySpec::new(Colormap::Viridis, 0.5, dir.path().join("o.png")).unwrap();
        let out = render_overlay(&image(30, 20), &m, &spec).unwrap();
        assert_eq!(out.sidecar_path, dir.path().join("o_map.png"));
        let back = read_sidecar(&out.sidecar_path).unwrap();
        assert_eq!((back.width, back.height), (7, 7));
        for (a, b) in back.values.iter().zip(&values) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
        let written = RgbImage::load(&out.overlay_path).unwrap();
        assert_eq!((written.width, written.height), (30, 20));
    }
}
