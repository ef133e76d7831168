//! Plain-text `key = value` scenario files.
//!
//! ```text
//! # reference scenario; every key is optional
//! family = LL3
//! fixed_effects = 5, 2000, 0.5
//! random_parameters = b, d, e
//! random_sd = 0.5, 500, 0.1
//! correlation = unstructured          # or diagonal
//! correlation_matrix = 1, -0.9, 0.8; -0.9, 1, -0.5; 0.8, -0.5, 1
//! residual_sd = 100
//! dose_min = 0.01
//! dose_max = 3
//! dose_levels = 10                    # or: doses = 0, 0.1, 1, 10
//! obs_per_dose = 1
//! sigma_e_scale = 1
//! ```

use std::collections::BTreeSet;

use super::{log_spaced, Correlation, Scenario};
use crate::error::{Error, Result};
use crate::models::parse_param_list;

fn numbers(value: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("line {line}: `{key}` expects finite numbers, got `{}`", t.trim())))
        })
        .collect()
}

fn number(value: &str, line: usize, key: &str) -> Result<f64> {
    match numbers(value, line, key)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects one number"))),
    }
}

fn count(value: &str, line: usize, key: &str) -> Result<usize> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` expects a nonnegative integer, got `{}`", value.trim())))
}

/// Parse a scenario file; unspecified keys keep the reference values.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut s = Scenario::default();
    let mut seen = BTreeSet::new();
    let (mut dose_min, mut dose_max, mut dose_levels) = (0.01, 3.0, 10usize);
    let mut grid_keys = false;
    let mut explicit_doses = None;
    let mut sigma_e_scale = 1.0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("line {line}: `{key}` given twice")));
        }
        match key.as_str() {
            "family" => s.family = value.parse().map_err(|e| Error::Config(format!("line {line}: {e}")))?,
            "fixed_effects" => s.fixed_effects = numbers(value, line, &key)?,
            "random_parameters" => {
                s.random_parameters = parse_param_list(value).map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "random_sd" => s.random_sd = numbers(value, line, &key)?,
            "correlation" => {
                s.correlation = match value.to_ascii_lowercase().as_str() {
                    "unstructured" | "un" => Correlation::Unstructured,
                    "diagonal" | "diag" => Correlation::Diagonal,
                    other => return Err(Error::Config(format!("line {line}: unknown correlation `{other}`"))),
                }
            }
            "correlation_matrix" => {
                s.correlation_matrix = value.split(';').map(|row| numbers(row, line, &key)).collect::<Result<_>>()?
            }
            "residual_sd" => s.residual_sd = number(value, line, &key)?,
            "dose_min" => {
                dose_min = number(value, line, &key)?;
                grid_keys = true;
            }
            "dose_max" => {
                dose_max = number(value, line, &key)?;
                grid_keys = true;
            }
            "dose_levels" => {
                dose_levels = count(value, line, &key)?;
                grid_keys = true;
            }
            "doses" => explicit_doses = Some(numbers(value, line, &key)?),
            "obs_per_dose" => s.obs_per_dose = count(value, line, &key)?,
            "sigma_e_scale" => sigma_e_scale = number(value, line, &key)?,
            other => return Err(Error::Config(format!("line {line}: unknown key `{other}`"))),
        }
    }

    match (explicit_doses, grid_keys) {
        (Some(_), true) => return Err(Error::Config("give either `doses` or the dose_min/dose_max/dose_levels grid".into())),
        (Some(d), false) => s.doses = d,
        (None, _) => {
            if !(dose_min > 0.0 && dose_max >= dose_min) || dose_levels == 0 || dose_levels > 100_000 {
                return Err(Error::Config("dose grid needs 0 < dose_min <= dose_max and 1..=100000 levels".into()));
            }
            s.doses = log_spaced(dose_min, dose_max, dose_levels);
        }
    }
    if !(sigma_e_scale.is_finite() && sigma_e_scale >= 0.0) {
        return Err(Error::Config("sigma_e_scale must be finite and nonnegative".into()));
    }
    s = s.with_sigma_e_scale(sigma_e_scale);
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelFamily, Param};

    #[test]
    fn empty_file_is_reference() {
        assert_eq!(parse_scenario("").unwrap(), Scenario::default());
        assert_eq!(parse_scenario("# nothing\n\n").unwrap(), Scenario::default());
    }

    #[test]
    fn full_file() {
        let text = "family = LL4\nfixed_effects = 2, 1, 10, 0.5\nrandom_parameters = c,d\nrandom_sd = 0.1, 1\n\
                    correlation = diagonal\nresidual_sd = 0.5\ndoses = 0, 0.1, 1, 10 # four\nobs_per_dose = 2\n";
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.family, ModelFamily::LL4);
        assert_eq!(s.random_parameters, vec![Param::C, Param::D]);
        assert_eq!(s.doses, vec![0.0, 0.1, 1.0, 10.0]);
        assert_eq!(s.obs_per_dose, 2);
        assert_eq!(s.correlation, Correlation::Diagonal);
    }

    #[test]
    fn tenfold_e() {
        let s = parse_scenario("sigma_e_scale = 10").unwrap();
        assert!((s.random_sd[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("family = LL3\nbogus = 1", "line 2"),
            ("residual_sd = abc", "line 1"),
            ("residual_sd = 1\nresidual_sd = 2", "twice"),
            ("no equals sign", "line 1"),
            ("random_sd = 1, 2", "standard deviations"),
            ("doses = 1, 2\ndose_levels = 4", "either"),
            ("correlation_matrix = 1, 2, 0; 2, 1, 0; 0, 0, 1", "correlation"),
        ] {
            let err = parse_scenario(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }
}
