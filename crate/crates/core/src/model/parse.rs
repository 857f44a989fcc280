use std::collections::BTreeMap;

use super::{
    is_ident, Bound, Indicator, Loading, LoadingRef, ModelSpec, ParamStatus, VariableKind,
};
use crate::error::{CfaError, Result};

struct Line<'a> {
    number: usize,
    text: &'a str,
}

/// Parses model source text.
///
/// ```text
/// F =~ x1 + x2 + x3      # loadings
/// fix F.x1 = 1
/// start F.x2 = -1
/// bound F.x3 lower 0
/// fixvar F = 1
/// fixcov F G = 0
/// fixres x1 = 0.5
/// fixint x1 = 0
/// ordinal x2 3
/// ```
///
/// Factor lines are read first, so directives may appear anywhere.
/// Indicator order follows first appearance in the factor lines.
pub fn parse_model_text(text: &str) -> Result<ModelSpec> {
    if text.trim().is_empty() {
        return Err(CfaError::Syntax {
            line: 1,
            message: "empty model".into(),
        });
    }
    let lines: Vec<Line> = text
        .lines()
        .enumerate()
        .map(|(i, raw)| Line {
            number: i + 1,
            text: raw.split('#').next().unwrap_or("").trim(),
        })
        .filter(|l| !l.text.is_empty())
        .collect();

    let mut spec = ModelSpec::default();
    for line in lines.iter().filter(|l| l.text.contains("=~")) {
        parse_factor_line(line, &mut spec)?;
    }
    if spec.factors.is_empty() {
        return Err(CfaError::Syntax {
            line: lines.first().map(|l| l.number).unwrap_or(1),
            message: "no factor declared (expected `F =~ x1 + ...`)".into(),
        });
    }
    for f in &spec.factors {
        spec.factor_variances.insert(f.clone(), ParamStatus::Free);
    }
    for i in 0..spec.factors.len() {
        for j in (i + 1)..spec.factors.len() {
            spec.factor_covariances.insert(
                (spec.factors[i].clone(), spec.factors[j].clone()),
                ParamStatus::Free,
            );
        }
    }
    for x in &spec.indicators {
        spec.residual_variances
            .insert(x.name.clone(), ParamStatus::Free);
        spec.intercepts.insert(x.name.clone(), ParamStatus::Free);
    }

    let mut seen = Directives::default();
    for line in lines.iter().filter(|l| !l.text.contains("=~")) {
        parse_directive(line, &mut spec, &mut seen)?;
    }

    for (r, b) in &spec.loading_bounds {
        if b.lower > b.upper {
            let line = seen.bound_lines.get(r).copied().unwrap_or(1);
            return Err(CfaError::InvalidBound {
                line,
                lower: b.lower,
                upper: b.upper,
            });
        }
    }
    let diagnostics = spec.validate();
    if let Some(d) = diagnostics.first() {
        return Err(CfaError::InvalidModel(d.to_string()));
    }
    Ok(spec)
}

#[derive(Default)]
struct Directives {
    keys: BTreeMap<String, usize>,
    bound_lines: BTreeMap<LoadingRef, usize>,
}

impl Directives {
    fn claim(&mut self, key: String, line: usize) -> Result<()> {
        if let Some(prev) = self.keys.insert(key.clone(), line) {
            return Err(CfaError::DuplicateDirective {
                line,
                message: format!("`{}` already given at line {}", key, prev),
            });
        }
        Ok(())
    }
}

fn syntax(line: &Line, message: impl Into<String>) -> CfaError {
    CfaError::Syntax {
        line: line.number,
        message: message.into(),
    }
}

fn parse_factor_line(line: &Line, spec: &mut ModelSpec) -> Result<()> {
    let (lhs, rhs) = line
        .text
        .split_once("=~")
        .ok_or_else(|| syntax(line, "expected `=~`"))?;
    let factor = lhs.trim();
    if !is_ident(factor) {
        return Err(syntax(line, format!("invalid factor name `{}`", factor)));
    }
    if spec.factors.iter().any(|f| f == factor) {
        return Err(CfaError::DuplicateDirective {
            line: line.number,
            message: format!("factor `{}` declared twice", factor),
        });
    }
    let terms: Vec<&str> = rhs.split('+').map(str::trim).collect();
    if terms.iter().any(|t| t.is_empty()) {
        return Err(syntax(line, "empty term in indicator list"));
    }
    spec.factors.push(factor.to_string());
    for t in terms {
        if !is_ident(t) {
            return Err(syntax(line, format!("invalid indicator name `{}`", t)));
        }
        if spec.factors.iter().any(|f| f == t) {
            return Err(syntax(line, format!("`{}` is a factor", t)));
        }
        if spec
            .loadings
            .iter()
            .any(|l| l.factor == factor && l.indicator == t)
        {
            return Err(CfaError::DuplicateDirective {
                line: line.number,
                message: format!("loading {}.{} listed twice", factor, t),
            });
        }
        if spec.indicator_index(t).is_none() {
            spec.indicators.push(Indicator {
                name: t.to_string(),
                kind: VariableKind::Continuous,
            });
        }
        spec.loadings.push(Loading {
            factor: factor.to_string(),
            indicator: t.to_string(),
            status: ParamStatus::Free,
        });
    }
    Ok(())
}

fn parse_number(line: &Line, s: &str) -> Result<f64> {
    match s.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| syntax(line, format!("invalid number `{}`", t))),
    }
}

fn loading_ref(line: &Line, spec: &ModelSpec, s: &str) -> Result<LoadingRef> {
    let r = LoadingRef::parse(s)
        .ok_or_else(|| syntax(line, format!("expected `factor.indicator`, got `{}`", s)))?;
    if spec.loading(&r).is_none() {
        let name = if spec.factor_index(&r.factor).is_none() {
            r.factor.clone()
        } else {
            r.to_string()
        };
        return Err(CfaError::UnknownVariable {
            name,
            line: line.number,
        });
    }
    Ok(r)
}

/// Splits `lhs = value`.
fn assignment<'a>(line: &Line, rest: &'a str) -> Result<(&'a str, &'a str)> {
    let (lhs, rhs) = rest
        .split_once('=')
        .ok_or_else(|| syntax(line, "expected `=`"))?;
    if rhs.trim().is_empty() {
        return Err(syntax(line, "missing value"));
    }
    Ok((lhs.trim(), rhs.trim()))
}

fn known_factor(line: &Line, spec: &ModelSpec, f: &str) -> Result<()> {
    if spec.factor_index(f).is_none() {
        return Err(CfaError::UnknownVariable {
            name: f.to_string(),
            line: line.number,
        });
    }
    Ok(())
}

fn known_indicator(line: &Line, spec: &ModelSpec, x: &str) -> Result<()> {
    if spec.indicator_index(x).is_none() {
        return Err(CfaError::UnknownVariable {
            name: x.to_string(),
            line: line.number,
        });
    }
    Ok(())
}

fn parse_directive(line: &Line, spec: &mut ModelSpec, seen: &mut Directives) -> Result<()> {
    let (keyword, rest) = line
        .text
        .split_once(char::is_whitespace)
        .ok_or_else(|| syntax(line, format!("incomplete statement `{}`", line.text)))?;
    let rest = rest.trim();
    match keyword {
        "fix" => {
            let (lhs, rhs) = assignment(line, rest)?;
            let r = loading_ref(line, spec, lhs)?;
            let v = parse_number(line, rhs)?;
            seen.claim(format!("fix {}", r), line.number)?;
            spec.loading_mut(&r).expect("checked").status = ParamStatus::Fixed(v);
        }
        "start" => {
            let (lhs, rhs) = assignment(line, rest)?;
            let r = loading_ref(line, spec, lhs)?;
            let v = parse_number(line, rhs)?;
            seen.claim(format!("start {}", r), line.number)?;
            spec.loading_starts.insert(r, v);
        }
        "bound" => {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(syntax(line, "expected `bound F.x lower|upper value`"));
            }
            let r = loading_ref(line, spec, parts[0])?;
            let v = parse_number(line, parts[2])?;
            let side = parts[1];
            if side != "lower" && side != "upper" {
                return Err(syntax(line, format!("expected lower or upper, got `{}`", side)));
            }
            seen.claim(format!("bound {} {}", r, side), line.number)?;
            seen.bound_lines.insert(r.clone(), line.number);
            let b = spec.loading_bounds.entry(r).or_insert_with(Bound::default);
            if side == "lower" {
                b.lower = v;
            } else {
                b.upper = v;
            }
        }
        "fixvar" => {
            let (lhs, rhs) = assignment(line, rest)?;
            known_factor(line, spec, lhs)?;
            let v = parse_number(line, rhs)?;
            seen.claim(format!("fixvar {}", lhs), line.number)?;
            spec.factor_variances
                .insert(lhs.to_string(), ParamStatus::Fixed(v));
        }
        "fixcov" => {
            let (lhs, rhs) = assignment(line, rest)?;
            let names: Vec<&str> = lhs.split_whitespace().collect();
            if names.len() != 2 {
                return Err(syntax(line, "expected `fixcov F G = value`"));
            }
            known_factor(line, spec, names[0])?;
            known_factor(line, spec, names[1])?;
            if names[0] == names[1] {
                return Err(syntax(line, "covariance needs two distinct factors"));
            }
            let (a, b) = if spec.factor_index(names[0]) < spec.factor_index(names[1]) {
                (names[0], names[1])
            } else {
                (names[1], names[0])
            };
            let v = parse_number(line, rhs)?;
            seen.claim(format!("fixcov {} {}", a, b), line.number)?;
            spec.factor_covariances
                .insert((a.to_string(), b.to_string()), ParamStatus::Fixed(v));
        }
        "fixres" | "fixint" => {
            let (lhs, rhs) = assignment(line, rest)?;
            known_indicator(line, spec, lhs)?;
            let v = parse_number(line, rhs)?;
            seen.claim(format!("{} {}", keyword, lhs), line.number)?;
            let map = if keyword == "fixres" {
                &mut spec.residual_variances
            } else {
                &mut spec.intercepts
            };
            map.insert(lhs.to_string(), ParamStatus::Fixed(v));
        }
        "ordinal" => {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(syntax(line, "expected `ordinal x C`"));
            }
            known_indicator(line, spec, parts[0])?;
            let c: usize = parts[1]
                .parse()
                .map_err(|_| syntax(line, format!("invalid category count `{}`", parts[1])))?;
            if c < 2 {
                return Err(syntax(line, "ordinal variables need at least 2 categories"));
            }
            seen.claim(format!("ordinal {}", parts[0]), line.number)?;
            let idx = spec.indicator_index(parts[0]).expect("checked");
            spec.indicators[idx].kind = VariableKind::Ordinal { categories: c };
        }
        other => return Err(syntax(line, format!("unknown directive `{}`", other))),
    }
    Ok(())
}
