//! Persisted experiment outputs: line-delimited run records, the summary
//! CSV and learning-curve plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::transfer::{Condition, CurvePoint, RunRecord, SizeComparison};

pub const CSV_HEADER: &str = "condition,size,seed,ica,ef1,ser";

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One row per run: `condition,size,seed,ica,ef1,ser` (metrics in [0, 1]).
pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.condition, r.train_size, r.seed, r.test.ica, r.test.ef1, r.test.ser
        );
    }
    out
}

/// Plain-text table of mean/std SER per size plus the pairwise tests.
pub fn curve_table(curves: &[CurvePoint], comparisons: &[SizeComparison]) -> String {
    let mut out = String::from("condition,size,runs,mean_ser,std_ser,mean_ica,mean_ef1\n");
    for p in curves {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            p.condition, p.size, p.runs, p.mean_ser, p.std_ser, p.mean_ica, p.mean_ef1
        );
    }
    if !comparisons.is_empty() {
        out.push_str("\nsize,a,b,mean_ser_diff,t,p_value,significant\n");
        for c in comparisons {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.3},{:.4},{}",
                c.size, c.a, c.b, c.ser.mean_difference, c.ser.t, c.ser.p_value, c.ser.significant
            );
        }
    }
    out
}

/// SVG of mean test SER against training size, one line per condition,
/// with a log-scaled x axis whose ticks are exactly the sizes present.
/// Significant pairwise differences are listed under the title.
pub fn plot_learning_curves(path: &Path, curves: &[CurvePoint], comparisons: &[SizeComparison]) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    ensure_parent(path)?;
    let plot_err = |e: String| Error::InvalidArgument(format!("plotting failed: {e}"));
    let mut sizes: Vec<usize> = curves.iter().map(|p| p.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut conditions: Vec<Condition> = curves.iter().map(|p| p.condition).collect();
    conditions.sort();
    conditions.dedup();
    let y_max = curves
        .iter()
        .map(|p| 100.0 * (p.mean_ser + p.std_ser))
        .fold(1.0f64, f64::max)
        * 1.1;
    let x_lo = (sizes[0] as f64).ln() - 0.2;
    let x_hi = (*sizes.last().unwrap() as f64).ln() + 0.2;

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let notes: Vec<String> = comparisons
        .iter()
        .filter(|c| c.ser.significant)
        .map(|c| format!("n={}: {} vs {} p={:.3}", c.size, c.a, c.b, c.ser.p_value))
        .collect();
    let (title_area, chart_area) = root.split_vertically(40 + 16 * notes.len().min(6) as u32);
    title_area
        .titled("Sentence error rate vs training size", ("sans-serif", 22))
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, note) in notes.iter().take(6).enumerate() {
        title_area
            .draw_text(note, &("sans-serif", 12).into_text_style(&title_area), (60, 30 + 16 * i as i32))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    let mut chart = ChartBuilder::on(&chart_area)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x_lo..x_hi, 0.0..y_max)
        .map_err(|e| plot_err(e.to_string()))?;
    let tick_sizes = sizes.clone();
    chart
        .configure_mesh()
        .x_desc("training utterances")
        .y_desc("SER (%)")
        .x_labels(0)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    // Tick labels sit below the plotting area, so they are placed in pixels.
    let tick_style = ("sans-serif", 12).into_text_style(&root);
    for &s in &tick_sizes {
        let (px, py) = chart.backend_coord(&((s as f64).ln(), 0.0));
        root.draw_text(&s.to_string(), &tick_style, (px - 8, py + 8))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    for (i, c) in conditions.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = curves
            .iter()
            .filter(|p| p.condition == *c)
            .map(|p| ((p.size as f64).ln(), 100.0 * p.mean_ser))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(c.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Significance;

    fn point(condition: Condition, size: usize, ser: f64) -> CurvePoint {
        CurvePoint {
            condition,
            size,
            runs: 2,
            mean_ser: ser,
            std_ser: 0.01,
            mean_ica: 0.9,
            mean_ef1: 0.8,
        }
    }

    #[test]
    fn plot_labels_exactly_the_configured_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.svg");
        let curves = vec![
            point(Condition::NoUt, 100, 0.3),
            point(Condition::NoUt, 1000, 0.2),
            point(Condition::Elmol, 100, 0.25),
            point(Condition::Elmol, 1000, 0.15),
        ];
        let comparisons = vec![SizeComparison {
            size: 100,
            a: Condition::NoUt,
            b: Condition::Elmol,
            ser: Significance {
                mean_difference: 0.05,
                t: 9.0,
                df: 1,
                p_value: 0.01,
                significant: true,
            },
        }];
        plot_learning_curves(&path, &curves, &comparisons).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        let texts: Vec<&str> = svg.lines().map(str::trim).collect();
        assert!(texts.contains(&"100") && texts.contains(&"1000"));
        assert!(svg.contains("n=100: no-ut vs elmol p=0.010"));
        assert!(plot_learning_curves(&path, &[], &[]).is_err());
        let table = curve_table(&curves, &comparisons);
        assert_eq!(table.lines().count(), 1 + 4 + 1 + 1 + 1);
    }
}
