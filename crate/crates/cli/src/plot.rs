use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use hierd2t::AttentionStep;

const BAR_WIDTH: u32 = 24;
const GAP: u32 = 6;
const PANEL_HEIGHT: u32 = 120;
const MARGIN: u32 = 10;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const ENTITY: Rgb<u8> = Rgb([49, 106, 176]);
const RECORD: Rgb<u8> = Rgb([214, 96, 44]);
const HIGHLIGHT: Rgb<u8> = Rgb([20, 40, 90]);

fn panel_width(bars: usize) -> u32 {
    bars as u32 * (BAR_WIDTH + GAP) + GAP
}

fn draw_panel(img: &mut RgbImage, top: u32, values: &[f64], color: Rgb<u8>, highlight: Option<usize>) {
    let base = top + PANEL_HEIGHT;
    for x in MARGIN..MARGIN + panel_width(values.len()) {
        img.put_pixel(x, base, AXIS);
    }
    for (i, &v) in values.iter().enumerate() {
        let h = (v.clamp(0.0, 1.0) * f64::from(PANEL_HEIGHT - 1)).round() as u32;
        let x0 = MARGIN + GAP + i as u32 * (BAR_WIDTH + GAP);
        let c = if highlight == Some(i) { HIGHLIGHT } else { color };
        for x in x0..x0 + BAR_WIDTH {
            for y in base - h..base {
                img.put_pixel(x, y, c);
            }
        }
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Bar chart of one decoding step: attention over entities on top (the
/// chosen entity darker), attention over that entity's records below.
pub fn render_step(step: &AttentionStep) -> RgbImage {
    let ent = argmax(&step.alpha);
    let records = step.beta.get(ent).map_or(&[][..], Vec::as_slice);
    let width = panel_width(step.alpha.len().max(records.len())) + 2 * MARGIN;
    let height = 2 * PANEL_HEIGHT + 3 * MARGIN + 2;
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    draw_panel(&mut img, MARGIN, &step.alpha, ENTITY, Some(ent));
    draw_panel(&mut img, 2 * MARGIN + PANEL_HEIGHT + 1, records, RECORD, None);
    img
}

pub fn save_step(step: &AttentionStep, path: &Path) -> Result<()> {
    render_step(step).save(path).with_context(|| format!("cannot write {}", path.display()))
}
