//! Token-usage heatmaps and original-versus-reconstruction overlays.

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::vision::{encode_png, min_max, Canvas, PALETTE};

const CELL_W: u32 = 12;
const CELL_H: u32 = 24;

/// One row of cells per domain, one column per code; darker means more
/// frequent, scaled to each row's maximum. Returns the PNG and a CSV of the
/// same counts.
pub fn usage_heatmap(rows: &[(String, Vec<u64>)]) -> Result<(Vec<u8>, String)> {
    let width = rows.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
    if rows.is_empty() || width == 0 {
        return Err(Error::invalid("heatmap needs at least one non-empty histogram"));
    }
    let mut img = RgbImage::from_pixel(width as u32 * CELL_W, rows.len() as u32 * CELL_H, Rgb([255, 255, 255]));
    let mut csv = String::from("domain,code,count\n");
    for (r, (domain, hist)) in rows.iter().enumerate() {
        let max = hist.iter().copied().max().unwrap_or(0).max(1) as f64;
        for (k, &c) in hist.iter().enumerate() {
            csv.push_str(&format!("{domain},{k},{c}\n"));
            let shade = 255 - (255.0 * c as f64 / max).round() as u8;
            let color = Rgb([shade, shade, 255]);
            for y in 0..CELL_H {
                for x in 0..CELL_W - 1 {
                    img.put_pixel(k as u32 * CELL_W + x, r as u32 * CELL_H + y, color);
                }
            }
        }
    }
    Ok((encode_png(&img)?, csv))
}

pub const ORIGINAL_COLOR: Rgb<u8> = PALETTE[0];
pub const RECON_COLOR: Rgb<u8> = PALETTE[1];

/// Stacked panels, one per (instance, channel), each with the original in
/// blue and the reconstruction in red on a shared vertical scale.
pub fn overlay_panels(pairs: &[(ArrayView2<f64>, ArrayView2<f64>)], width: u32, panel_height: u32) -> Result<Vec<u8>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no series to plot"));
    }
    let panels: usize = pairs.iter().map(|(o, _)| o.nrows()).sum();
    let mut canvas = Canvas::new(width, panels as u32 * panel_height, 1);
    let mut top = 0;
    for (orig, recon) in pairs {
        if orig.dim() != recon.dim() {
            return Err(Error::shape("original and reconstruction differ in shape"));
        }
        for (o, r) in orig.outer_iter().zip(recon.outer_iter()) {
            let (o, r) = (o.to_vec(), r.to_vec());
            let (lo1, hi1) = min_max(&o);
            let (lo2, hi2) = min_max(&r);
            let (lo, hi) = (lo1.min(lo2), hi1.max(hi2));
            canvas.trace(&o, lo, hi, top, panel_height, ORIGINAL_COLOR);
            canvas.trace(&r, lo, hi, top, panel_height, RECON_COLOR);
            top += panel_height;
        }
    }
    canvas.png_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn heatmap_csv_matches_counts() {
        let rows = vec![("a".to_string(), vec![3, 0, 1]), ("b".to_string(), vec![0, 5, 0])];
        let (png, csv) = usage_heatmap(&rows).unwrap();
        assert!(csv.contains("a,0,3\n") && csv.contains("b,1,5\n"));
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(png, usage_heatmap(&rows).unwrap().0);
    }

    #[test]
    fn overlay_has_two_traces_per_panel() {
        let o = Array2::from_shape_fn((1, 64), |(_, t)| (t as f64 * 0.2).sin());
        let r = Array2::from_shape_fn((1, 64), |(_, t)| (t as f64 * 0.2).sin() * 0.5);
        let png = overlay_panels(&[(o.view(), r.view())], 200, 100).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        let colors: std::collections::BTreeSet<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        assert!(colors.contains(&ORIGINAL_COLOR.0) && colors.contains(&RECON_COLOR.0));
        assert_eq!(colors.len(), 3);
    }
}
