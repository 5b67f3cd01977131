//! Report, curve, forecast series and ranking files.

use std::path::Path;

use karn_core::search::TrialRecord;
use karn_core::train::{EpochRecord, Evaluation, MetricsReport};

use crate::error::{Error, Result};
use crate::prepare::Prepared;
use crate::series::TIMESTAMP_FORMAT;

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::fsutil::write_atomic(path, text.as_bytes())
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    crate::fsutil::write_json(path, report)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    crate::fsutil::read_json(path)
}

/// `epoch,train_loss,val_loss,lr`, one row per epoch.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in curve {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    s
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    write_text(path, &curve_csv(curve))
}

/// One row per forecast hour, values at full round-trip precision.
pub fn forecast_csv(eval: &Evaluation, target_start: &[usize], horizon: usize, prep: &Prepared) -> String {
    let mut s = String::from("timestamp,sample,lead,actual,forecast\n");
    for (sample, &t0) in target_start.iter().enumerate() {
        for lead in 0..horizon {
            let k = sample * horizon + lead;
            s.push_str(&format!(
                "{},{sample},{},{},{}\n",
                prep.timestamp(t0 + lead).format(TIMESTAMP_FORMAT),
                lead + 1,
                eval.actual[k],
                eval.forecast[k]
            ));
        }
    }
    s
}

pub fn write_forecast(path: &Path, eval: &Evaluation, target_start: &[usize], horizon: usize, prep: &Prepared) -> Result<()> {
    write_text(path, &forecast_csv(eval, target_start, horizon, prep))
}

/// `(actual, forecast)` columns of a forecast CSV.
pub fn read_forecast(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (mut a, mut f) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad row {rec:?}")))
        };
        a.push(num(3)?);
        f.push(num(4)?);
    }
    Ok((a, f))
}

/// Ranking of successful trials by validation loss, then failed trials.
pub fn ranking_csv(trials: &[TrialRecord], hash: impl Fn(&TrialRecord) -> String) -> String {
    let mut s = String::from(
        "rank,trial,config_hash,family,hidden_size,num_layers,optimizer,objective,spline_degree,grid_points,best_val_loss,val_mae,val_rmse,val_smape,test_smape,status\n",
    );
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut row = |rank: String, t: &TrialRecord| {
        let c = &t.config;
        let (loss, mae, rmse, smape, test) = match &t.report {
            Some(r) => (
                r.best_val_loss.to_string(),
                r.validation.mae.to_string(),
                r.validation.rmse.to_string(),
                r.validation.smape.to_string(),
                r.test.map(|m| m.smape.to_string()).unwrap_or_default(),
            ),
            None => Default::default(),
        };
        let status = match &t.error {
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            None => "ok".into(),
        };
        s.push_str(&format!(
            "{rank},{},{},{},{},{},{},{},{},{},{loss},{mae},{rmse},{smape},{test},{status}\n",
            t.index,
            hash(t),
            c.family,
            c.hidden_size,
            c.num_layers,
            c.optimizer,
            c.objective,
            opt(c.spline_degree),
            opt(c.grid_points),
        ));
    };
    let ranked = karn_core::search::rank(trials);
    for (r, &k) in ranked.iter().enumerate() {
        row((r + 1).to_string(), &trials[k]);
    }
    for t in trials.iter().filter(|t| t.val_loss().is_none()) {
        row(String::new(), t);
    }
    s
}

/// Line chart of actual and lead-1 forecast load.
pub fn forecast_svg(actual: &[f64], forecast: &[f64], title: &str) -> String {
    let (w, h, pad) = (900.0, 320.0, 40.0);
    let n = actual.len().max(2);
    let lo = actual.iter().chain(forecast).cloned().fold(f64::INFINITY, f64::min);
    let hi = actual.iter().chain(forecast).cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let path = |ys: &[f64]| {
        ys.iter()
            .enumerate()
            .map(|(i, y)| {
                let px = pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
                let py = h - pad - (h - 2.0 * pad) * (y - lo) / span;
                format!("{}{px:.1},{py:.1}", if i == 0 { "M" } else { " L" })
            })
            .collect::<String>()
    };
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    s.push_str(&format!("<text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"));
    s.push_str(&format!(
        "<text x=\"4\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{hi:.1}</text>\n<text x=\"4\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.1}</text>\n",
        pad + 4.0,
        h - pad
    ));
    s.push_str(&format!("<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1\"/>\n", path(actual)));
    s.push_str(&format!("<path d=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1\"/>\n", path(forecast)));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f77b4\">actual</text>\n<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#d62728\">forecast</text>\n",
        w - 160.0,
        w - 100.0
    ));
    s.push_str("</svg>\n");
    s
}
