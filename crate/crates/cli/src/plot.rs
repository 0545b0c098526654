use std::path::Path;
use std::sync::Once;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use dicl_core::experiment::TableReport;
use dicl_core::trainer::MetricRecord;

const FONT_ENV: &str = "DICL_FONT";
const FONT_PATHS: [&str; 2] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

pub enum Chart {
    Losses(Vec<MetricRecord>),
    Table(TableReport),
    Sweep(Vec<(usize, f64, f64)>),
}

pub fn read_sweep(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| anyhow!("short row in {}", path.display()));
        rows.push((field(0)?.parse()?, field(1)?.parse()?, field(2)?.parse()?));
    }
    Ok(rows)
}

const LOSS_NAMES: [&str; 7] = ["l_all", "l_det", "l_c", "l_mto", "l_o", "l_tri", "l_oim"];

fn loss_rows(records: &[MetricRecord]) -> Vec<(u64, usize, f64, [f64; 7])> {
    records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Step(s) => {
                let l = &s.losses;
                Some((s.step, s.epoch, s.lr, [l.l_all, l.l_det, l.l_c, l.l_mto, l.l_o, l.l_tri, l.l_oim]))
            }
            _ => None,
        })
        .collect()
}

fn load_font() -> Result<()> {
    static ONCE: Once = Once::new();
    let mut result = Ok(());
    ONCE.call_once(|| {
        let candidates: Vec<String> = std::env::var(FONT_ENV)
            .into_iter()
            .chain(FONT_PATHS.iter().map(|s| s.to_string()))
            .collect();
        result = candidates
            .iter()
            .find_map(|p| std::fs::read(p).ok())
            .ok_or_else(|| anyhow!("no TrueType font found; set {FONT_ENV} to a .ttf file"))
            .and_then(|bytes| {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                register_font("sans-serif", FontStyle::Normal, bytes).map_err(|_| anyhow!("unreadable font"))
            });
    });
    result
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

impl Chart {
    pub fn to_csv(&self) -> Result<String> {
        Ok(match self {
            Chart::Losses(records) => {
                let mut s = format!("step,epoch,lr,{}\n", LOSS_NAMES.join(","));
                for (step, epoch, lr, l) in loss_rows(records) {
                    let vals: Vec<String> = l.iter().map(|v| format!("{v:.6}")).collect();
                    s.push_str(&format!("{step},{epoch},{lr},{}\n", vals.join(",")));
                }
                s
            }
            Chart::Table(report) => report.to_csv(),
            Chart::Sweep(rows) => {
                let mut s = String::from("gallery_size,map,top1\n");
                for (g, m, t) in rows {
                    s.push_str(&format!("{g},{m:.6},{t:.6}\n"));
                }
                s
            }
        })
    }

    pub fn draw_png(&self, path: &Path) -> Result<()> {
        load_font()?;
        let root = BitMapBackend::new(path, (960, 560)).into_drawing_area();
        root.fill(&WHITE)?;
        match self {
            Chart::Losses(records) => {
                let rows = loss_rows(records);
                let x_max = rows.last().map_or(1, |r| r.0).max(1) as f64;
                let (y0, y1) = span(rows.iter().flat_map(|r| r.3.iter().copied()));
                let mut chart = ChartBuilder::on(&root)
                    .caption("training losses", ("sans-serif", 22))
                    .margin(14)
                    .x_label_area_size(40)
                    .y_label_area_size(60)
                    .build_cartesian_2d(0.0..x_max, y0.min(0.0)..y1)?;
                chart.configure_mesh().x_desc("step").y_desc("loss").draw()?;
                for (k, name) in LOSS_NAMES.iter().enumerate() {
                    let color = Palette99::pick(k).to_rgba();
                    chart
                        .draw_series(LineSeries::new(rows.iter().map(|r| (r.0 as f64, r.3[k])), color.stroke_width(2)))?
                        .label(*name)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
                }
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.85))
                    .border_style(BLACK)
                    .draw()?;
            }
            Chart::Table(report) => {
                let n = report.rows.len();
                if n == 0 {
                    bail!("table has no rows");
                }
                let labels: Vec<String> = report.rows.iter().map(|r| r.label.clone()).collect();
                let mut chart = ChartBuilder::on(&root)
                    .caption(format!("ablation table {}", report.table), ("sans-serif", 22))
                    .margin(14)
                    .x_label_area_size(40)
                    .y_label_area_size(60)
                    .build_cartesian_2d(0.0..n as f64, 0.0..100.0)?;
                chart
                    .configure_mesh()
                    .disable_x_mesh()
                    .x_labels(n * 2 + 1)
                    .x_label_formatter(&|x| {
                        let i = x.floor() as usize;
                        if (x - i as f64 - 0.5).abs() < 0.26 && i < labels.len() {
                            labels[i].clone()
                        } else {
                            String::new()
                        }
                    })
                    .y_desc("%")
                    .draw()?;
                let series: [(&str, fn(&dicl_core::experiment::TableRow) -> f64); 2] =
                    [("mAP", |r| r.mean_map()), ("top-1", |r| r.mean_top1())];
                for (k, (name, value)) in series.into_iter().enumerate() {
                    let color = Palette99::pick(k).to_rgba();
                    chart
                        .draw_series(report.rows.iter().enumerate().map(|(i, r)| {
                            let x0 = i as f64 + 0.1 + 0.4 * k as f64;
                            Rectangle::new([(x0, 0.0), (x0 + 0.4, 100.0 * value(r))], color.filled())
                        }))?
                        .label(name)
                        .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.filled()));
                }
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.85))
                    .border_style(BLACK)
                    .draw()?;
            }
            Chart::Sweep(rows) => {
                let x_max = rows.iter().map(|r| r.0).max().unwrap_or(1) as f64;
                let mut chart = ChartBuilder::on(&root)
                    .caption("retrieval vs gallery size", ("sans-serif", 22))
                    .margin(14)
                    .x_label_area_size(40)
                    .y_label_area_size(60)
                    .build_cartesian_2d(0.0..x_max * 1.05, 0.0..100.0)?;
                chart.configure_mesh().x_desc("gallery size").y_desc("%").draw()?;
                for (k, name) in ["mAP", "top-1"].into_iter().enumerate() {
                    let color = Palette99::pick(k).to_rgba();
                    let pts: Vec<(f64, f64)> = rows
                        .iter()
                        .map(|r| (r.0 as f64, 100.0 * if k == 0 { r.1 } else { r.2 }))
                        .collect();
                    chart
                        .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                        .label(name)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
                    chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))?;
                }
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.85))
                    .border_style(BLACK)
                    .draw()?;
            }
        }
        root.present()?;
        Ok(())
    }
}
