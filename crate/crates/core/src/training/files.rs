use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DistortionForm, LossBreakdown, TrainConfig};
use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "epoch,lv,lo,ln,ls,lm,ld,total";

/// Applies `key = value` lines to `base`. Keys are the [`TrainConfig`] field
/// names, with the loss weights flattened (`lambda_o`, `alpha`, ...).
/// Blank lines and `#` comments are ignored; unknown keys are errors.
pub fn parse_config(text: &str, base: TrainConfig, context: &str) -> Result<TrainConfig> {
    let mut c = base;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::format(context, format!("line {}: {m}", no + 1));
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err("expected key = value".into()))?;
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| err(format!("`{key}` expects a number")))
        };
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| err(format!("`{key}` expects a nonnegative integer")))
        };
        let flag = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(err(format!("`{key}` expects true or false"))),
        };
        match key {
            "epochs" => c.epochs = int()?,
            "learning_rate" => c.learning_rate = num()?,
            "lr_decay_epochs" => {
                c.lr_decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|_| err("`lr_decay_epochs` expects integers".into()))
                    })
                    .collect::<Result<_>>()?
            }
            "lr_decay_factor" => c.lr_decay_factor = num()?,
            "steps_t" => c.steps_t = int()?,
            "batch_points" => c.batch_points = int()?,
            "full_batch_limit" => c.full_batch_limit = int()?,
            "seed" => {
                c.seed = value
                    .parse()
                    .map_err(|_| err("`seed` expects an integer".into()))?
            }
            "fd_step_h" => c.fd_step_h = num()?,
            "delta_d" => c.delta_d = if value == "auto" { None } else { Some(num()?) },
            "lambda_v" => c.weights.lambda_v = num()?,
            "lambda_o" => c.weights.lambda_o = num()?,
            "lambda_n" => c.weights.lambda_n = num()?,
            "lambda_s" => c.weights.lambda_s = num()?,
            "lambda_m" => c.weights.lambda_m = num()?,
            "lambda_d" => c.weights.lambda_d = num()?,
            "alpha" => c.weights.alpha = num()?,
            "distortion" => {
                c.distortion = match value {
                    "deviatoric" => DistortionForm::Deviatoric,
                    "literal" => DistortionForm::Literal,
                    _ => return Err(err("`distortion` is deviatoric or literal".into())),
                }
            }
            "unscaled_f" => c.unscaled_f = flag()?,
            "sample_points" => c.sample_points = int()?,
            "hidden_layers" => c.hidden_layers = int()?,
            "hidden_width" => c.hidden_width = int()?,
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
    }
    c.validate()
        .map_err(|e| Error::format(context, e.to_string()))?;
    Ok(c)
}

pub fn load_config(path: impl AsRef<Path>, base: TrainConfig) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, base, &path.display().to_string())
}

impl TrainConfig {
    /// The `key = value` form read by [`parse_config`].
    pub fn to_config_string(&self) -> String {
        let w = &self.weights;
        let decay: Vec<String> = self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let lines = [
            format!("epochs = {}", self.epochs),
            format!("learning_rate = {:e}", self.learning_rate),
            format!("lr_decay_epochs = {}", decay.join(",")),
            format!("lr_decay_factor = {}", self.lr_decay_factor),
            format!("steps_t = {}", self.steps_t),
            format!("batch_points = {}", self.batch_points),
            format!("full_batch_limit = {}", self.full_batch_limit),
            format!("seed = {}", self.seed),
            format!("fd_step_h = {:e}", self.fd_step_h),
            format!(
                "delta_d = {}",
                self.delta_d
                    .map_or("auto".to_string(), |d| format!("{d:e}"))
            ),
            format!("lambda_v = {}", w.lambda_v),
            format!("lambda_o = {}", w.lambda_o),
            format!("lambda_n = {}", w.lambda_n),
            format!("lambda_s = {}", w.lambda_s),
            format!("lambda_m = {}", w.lambda_m),
            format!("lambda_d = {}", w.lambda_d),
            format!("alpha = {}", w.alpha),
            format!(
                "distortion = {}",
                match self.distortion {
                    DistortionForm::Deviatoric => "deviatoric",
                    DistortionForm::Literal => "literal",
                }
            ),
            format!("unscaled_f = {}", self.unscaled_f),
            format!("sample_points = {}", self.sample_points),
            format!("hidden_layers = {}", self.hidden_layers),
            format!("hidden_width = {}", self.hidden_width),
        ];
        lines.join("\n") + "\n"
    }
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
        for (e, b) in history.iter().enumerate() {
            writeln!(
                w,
                "{e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                b.v, b.o, b.n, b.s, b.m, b.d, b.total
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossBreakdown>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOSS_CSV_HEADER) {
        return Err(Error::format(&ctx, "missing loss header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(&ctx, format!("row {}: bad number", i + 1)))?;
            if v.len() != 7 {
                return Err(Error::format(
                    &ctx,
                    format!("row {}: expected 8 columns", i + 1),
                ));
            }
            Ok(LossBreakdown {
                v: v[0],
                o: v[1],
                n: v[2],
                s: v[3],
                m: v[4],
                d: v[5],
                total: v[6],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut c = TrainConfig::default();
        c.weights.lambda_s = 0.0;
        c.delta_d = Some(0.02);
        c.distortion = DistortionForm::Literal;
        c.lr_decay_epochs = vec![10, 20, 30];
        let back = parse_config(&c.to_config_string(), TrainConfig::default(), "test").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_errors() {
        let base = TrainConfig::default();
        assert!(parse_config("epochs = many", base.clone(), "t")
            .unwrap_err()
            .is_input_format());
        assert!(parse_config("speed = 3", base.clone(), "t").is_err());
        assert!(parse_config("steps_t = 0", base.clone(), "t").is_err());
        let c = parse_config("# comment\n\nepochs=12 # trailing\n", base, "t").unwrap();
        assert_eq!(c.epochs, 12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let h = vec![
            LossBreakdown {
                v: 1.0,
                o: 2.0,
                n: 3.0,
                s: 4.0,
                m: 5.0,
                d: 6.0,
                total: 21.0,
            },
            LossBreakdown {
                v: 0.5,
                o: 1e-9,
                n: 0.0,
                s: 0.25,
                m: 0.125,
                d: 3e-3,
                total: 0.1,
            },
        ];
        write_loss_csv(&p, &h).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with("epoch,lv,lo,ln,ls,lm,ld,total\n0,"));
        assert_eq!(read_loss_csv(&p).unwrap(), h);
    }
}
