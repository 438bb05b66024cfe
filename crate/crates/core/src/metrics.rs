//! Metrics CSV export/import and loss-curve rendering (SVG).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::training::{EpochRecord, MetricsLog};

const FIXED_COLUMNS: [&str; 5] = ["epoch", "phase", "lr", "train_loss_total", "val_loss_total"];

pub fn csv_header(exits: usize) -> String {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=exits).map(|i| format!("val_err_{i}")));
    cols.join(",")
}

/// One row per epoch; the column set depends only on the exit count.
pub fn to_csv(log: &MetricsLog) -> String {
    let mut s = csv_header(log.exits);
    s.push('\n');
    for r in &log.records {
        write!(s, "{},{},{},{},{}", r.epoch, r.phase, r.lr, r.train_loss_total, r.val_loss_total).unwrap();
        for e in &r.val_err {
            write!(s, ",{e}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parses [`to_csv`] output. Per-exit losses are not part of the file and
/// come back empty.
pub fn parse_csv(text: &str) -> Result<MetricsLog> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < FIXED_COLUMNS.len() + 1 || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Csv {
            line: 1,
            msg: format!("header must start with {} and one val_err column", FIXED_COLUMNS.join(",")),
        });
    }
    let exits = cols.len() - FIXED_COLUMNS.len();
    if cols != csv_header(exits).split(',').collect::<Vec<_>>() {
        return Err(Error::Csv {
            line: 1,
            msg: format!("expected val_err_1..val_err_{exits}"),
        });
    }
    let mut log = MetricsLog::new(exits);
    for (line, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Csv {
                line,
                msg: format!("{} fields, header has {}", fields.len(), cols.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::Csv {
                line,
                msg: format!("column {} is not a number: {:?}", cols[i], fields[i]),
            })
        };
        let int = |i: usize| -> Result<usize> {
            fields[i].parse::<usize>().map_err(|_| Error::Csv {
                line,
                msg: format!("column {} is not an integer: {:?}", cols[i], fields[i]),
            })
        };
        let phase = int(1)?;
        if !(1..=2).contains(&phase) {
            return Err(Error::Csv {
                line,
                msg: format!("phase must be 1 or 2, got {phase}"),
            });
        }
        log.records.push(EpochRecord {
            epoch: int(0)?,
            phase: phase as u8,
            lr: num(2)?,
            train_loss_total: num(3)?,
            val_loss_total: num(4)?,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            val_err: (FIXED_COLUMNS.len()..cols.len()).map(num).collect::<Result<_>>()?,
        });
    }
    if log.records.is_empty() {
        return Err(Error::Csv {
            line: 2,
            msg: "no epoch rows after the header".into(),
        });
    }
    Ok(log)
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A "nice" tick step near `span / 5`.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// Training (solid) and validation (dashed) total-loss curves, one colour
/// per run. The output is a pure function of the inputs.
pub fn render_loss_curves(runs: &[(String, MetricsLog)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::contract("no runs to plot"));
    }
    if let Some((label, _)) = runs.iter().find(|(_, l)| l.records.is_empty()) {
        return Err(Error::contract(format!("run {label} has no epochs")));
    }
    let max_epoch = runs
        .iter()
        .flat_map(|(_, l)| l.records.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let values = runs
        .iter()
        .flat_map(|(_, l)| l.records.iter().flat_map(|r| [r.train_loss_total, r.val_loss_total]));
    let max_loss = values.clone().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let y_top = if max_loss > 0.0 { max_loss * 1.05 } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |epoch: f64| LEFT + (epoch - 1.0) / (max_epoch - 1.0) * plot_w;
    let y = |v: f64| TOP + plot_h - (v.clamp(0.0, y_top) / y_top) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">Total loss per epoch</text>"#,
        LEFT + plot_w / 2.0
    )
    .unwrap();

    let step = tick_step(y_top);
    let mut t = 0.0;
    while t <= y_top + 1e-12 {
        let py = y(t);
        writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            py + 4.0,
            format_tick(t, step)
        )
        .unwrap();
        t += step;
    }
    let xstep = tick_step(max_epoch - 1.0).max(1.0).round();
    let mut e = 1.0;
    while e <= max_epoch + 1e-9 {
        let px = x(e);
        writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            TOP + plot_h + 18.0
        )
        .unwrap();
        e += xstep;
    }
    writeln!(
        s,
        r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#333"/>"##
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 18.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">loss</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )
    .unwrap();

    // Phase boundary of the first run that has one.
    if let Some(first2) = runs
        .iter()
        .find_map(|(_, l)| l.records.iter().find(|r| r.phase == 2).filter(|r| r.epoch > 1))
    {
        let px = x(first2.epoch as f64 - 0.5);
        writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{TOP:.2}" x2="{px:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="2,3"/>"##,
            TOP + plot_h
        )
        .unwrap();
    }

    for (k, (label, log)) in runs.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for (dash, series, kind) in [
            ("", log.records.iter().map(|r| r.train_loss_total).collect::<Vec<_>>(), "train"),
            (
                r#" stroke-dasharray="6,4""#,
                log.records.iter().map(|r| r.val_loss_total).collect::<Vec<_>>(),
                "validation",
            ),
        ] {
            let points: Vec<String> = log
                .records
                .iter()
                .zip(&series)
                .map(|(r, &v)| format!("{:.2},{:.2}", x(r.epoch as f64), y(v)))
                .collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="2"{dash} points="{}"/>"#,
                points.join(" ")
            )
            .unwrap();
            let row = (2 * k + usize::from(kind == "validation")) as f64;
            let ly = TOP + 10.0 + row * 20.0;
            let lx = WIDTH - RIGHT + 14.0;
            writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{} {kind}</text>"#,
                lx + 26.0,
                lx + 32.0,
                ly + 4.0,
                escape(label)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10()).ceil() as usize };
    format!("{v:.decimals$}")
}
