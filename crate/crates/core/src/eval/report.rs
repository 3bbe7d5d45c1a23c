use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{CcvcError, Result};
use crate::trainer::{read_metrics, EpochRecord, MetricsRecord, StepRecord};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 270;
const MARGIN: u32 = 24;
const PALETTE: [[u8; 3]; 4] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
];

/// What [`report`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub steps: usize,
    pub epochs: usize,
    pub files: Vec<PathBuf>,
}

type Series = Vec<(f64, f64)>;

struct Plot {
    img: RgbImage,
}

impl Plot {
    fn new() -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let axis = Rgb([0, 0, 0]);
        for x in MARGIN..WIDTH - MARGIN / 2 {
            img.put_pixel(x, HEIGHT - MARGIN, axis);
        }
        for y in MARGIN / 2..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, y, axis);
        }
        Self { img }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.dot(x, y, 0, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn dot(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                if xx >= 0 && yy >= 0 && (xx as u32) < WIDTH && (yy as u32) < HEIGHT {
                    self.img.put_pixel(xx as u32, yy as u32, Rgb(c));
                }
            }
        }
    }

    /// Draws every series on shared axes scaled to their joint range.
    fn draw(mut self, series: &[Series], markers: bool) -> RgbImage {
        let pts = series
            .iter()
            .flatten()
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if xmin > xmax {
            return self.img;
        }
        if xmax - xmin < 1e-12 {
            xmax = xmin + 1.0;
        }
        if ymax - ymin < 1e-12 {
            ymax = ymin + 1.0;
        }
        let pw = (WIDTH - MARGIN - MARGIN / 2 - 4) as f64;
        let ph = (HEIGHT - MARGIN - MARGIN / 2 - 4) as f64;
        let map = |(x, y): (f64, f64)| {
            (
                (MARGIN + 2) as i64 + ((x - xmin) / (xmax - xmin) * pw).round() as i64,
                (HEIGHT - MARGIN - 2) as i64 - ((y - ymin) / (ymax - ymin) * ph).round() as i64,
            )
        };
        for (k, s) in series.iter().enumerate() {
            let c = PALETTE[k % PALETTE.len()];
            let finite: Vec<_> = s
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            for w in finite.windows(2) {
                self.line(map(w[0]), map(w[1]), c);
            }
            if markers {
                for &p in &finite {
                    let (x, y) = map(p);
                    self.dot(x, y, 2, c);
                }
            }
        }
        self.img
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| CcvcError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Renders curves from a metrics log into `out_dir/curves/*.png` and a
/// summary table into `out_dir/summary.txt`.
pub fn report(metrics_log: &Path, out_dir: &Path) -> Result<ReportSummary> {
    let records = read_metrics(metrics_log)?;
    let steps: Vec<&StepRecord> = records
        .iter()
        .filter_map(|r| {
            if let MetricsRecord::Step(s) = r {
                Some(s)
            } else {
                None
            }
        })
        .collect();
    let epochs: Vec<&EpochRecord> = records
        .iter()
        .filter_map(|r| {
            if let MetricsRecord::Epoch(e) = r {
                Some(e)
            } else {
                None
            }
        })
        .collect();

    let curves = out_dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    let step_series = |f: fn(&StepRecord) -> f64| -> Series {
        steps.iter().map(|s| (s.step as f64, f(s))).collect()
    };
    let epoch_series = |f: fn(&EpochRecord) -> Option<f64>| -> Series {
        epochs
            .iter()
            .filter_map(|e| f(e).map(|v| (e.epoch as f64, v)))
            .collect()
    };
    let plots: [(&str, Vec<Series>, bool); 4] = [
        (
            "loss.png",
            vec![
                step_series(|s| s.total),
                step_series(|s| s.sup),
                step_series(|s| s.con),
                step_series(|s| s.dis),
            ],
            false,
        ),
        (
            "val_miou.png",
            vec![
                epoch_series(|e| Some(e.val_miou)),
                epoch_series(|e| Some(e.train_miou)),
            ],
            true,
        ),
        (
            "feature_cosine.png",
            vec![
                epoch_series(|e| Some(e.mean_feature_cosine)),
                epoch_series(|e| Some(e.mapped_feature_cosine)),
            ],
            true,
        ),
        (
            "confidence.png",
            vec![
                epoch_series(|e| Some(e.confident_frac)),
                epoch_series(|e| e.confident_acc),
            ],
            true,
        ),
    ];
    let mut files = Vec::new();
    for (name, series, markers) in plots {
        let path = curves.join(name);
        save(&Plot::new().draw(&series, markers), &path)?;
        files.push(path);
    }

    let mut table =
        String::from("split\tepochs\tmIoU\tconfident_frac\tconfident_acc\tmean_cosine\n");
    if let Some(last) = epochs.last() {
        let n = epochs.len();
        writeln!(
            table,
            "val\t{n}\t{:.4}\t{:.4}\t{}\t{:.4}",
            last.val_miou,
            last.confident_frac,
            fmt_opt(last.confident_acc),
            last.mean_feature_cosine
        )
        .expect("string write");
        writeln!(table, "train\t{n}\t{:.4}\t-\t-\t-", last.train_miou).expect("string write");
    }
    let summary = out_dir.join("summary.txt");
    std::fs::write(&summary, table)?;
    files.push(summary);
    Ok(ReportSummary {
        steps: steps.len(),
        epochs: epochs.len(),
        files,
    })
}
