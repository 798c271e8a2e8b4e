use crate::error::{Error, Result};
use crate::train::IterationRecord;

pub const HEADER: &str = "timestep,eval_reward_mean,eval_reward_std,success_rate,episode_len_mean,policy_loss,value_loss,clip_fraction,approx_kl,encoder_mse,lr,sigma";

/// Prefix of the marker line appended when a run aborts.
pub const ERROR_MARKER: &str = "#error,";

/// One parsed log line. Evaluation columns are blank on iterations without
/// an evaluation, `encoder_mse` is blank for numeric variants.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub timestep: u64,
    pub eval_reward_mean: Option<f64>,
    pub eval_reward_std: Option<f64>,
    pub success_rate: Option<f64>,
    pub episode_len_mean: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub encoder_mse: Option<f64>,
    pub lr: f64,
    pub sigma: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn format_row(r: &IterationRecord) -> String {
    let e = r.eval;
    [
        r.timestep.to_string(),
        opt(e.map(|e| e.reward_mean)),
        opt(e.map(|e| e.reward_std)),
        opt(e.map(|e| e.success_rate)),
        opt(e.map(|e| e.episode_len_mean)),
        r.update.policy_loss.to_string(),
        r.update.value_loss.to_string(),
        r.update.clip_fraction.to_string(),
        r.update.approx_kl.to_string(),
        opt(r.encoder_mse),
        r.lr.to_string(),
        r.sigma.to_string(),
    ]
    .join(",")
}

/// Parse a whole log. Marker and other `#` lines are skipped; timesteps
/// must strictly increase.
pub fn parse(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        Some(h) => return Err(Error::Parse(format!("unexpected CSV header {h:?}"))),
        None => return Err(Error::Parse("empty CSV".into())),
    }
    let mut rows: Vec<CsvRow> = Vec::new();
    for line in lines.filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Parse(format!("expected 12 fields, got {}: {line:?}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad number {s:?} in {line:?}")))
        };
        let maybe = |s: &str| -> Result<Option<f64>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        let timestep: u64 = f[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad timestep in {line:?}")))?;
        if rows.last().is_some_and(|r| r.timestep >= timestep) {
            return Err(Error::Parse(format!("timestep {timestep} does not increase")));
        }
        rows.push(CsvRow {
            timestep,
            eval_reward_mean: maybe(f[1])?,
            eval_reward_std: maybe(f[2])?,
            success_rate: maybe(f[3])?,
            episode_len_mean: maybe(f[4])?,
            policy_loss: num(f[5])?,
            value_loss: num(f[6])?,
            clip_fraction: num(f[7])?,
            approx_kl: num(f[8])?,
            encoder_mse: maybe(f[9])?,
            lr: num(f[10])?,
            sigma: num(f[11])?,
        });
    }
    Ok(rows)
}

/// `(timestep, eval_reward_mean)` for every evaluated row.
pub fn eval_curve(rows: &[CsvRow]) -> Vec<(u64, f64)> {
    rows.iter()
        .filter_map(|r| r.eval_reward_mean.map(|m| (r.timestep, m)))
        .collect()
}
