//! Deterministic program tools shipped with the seed toolbox.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use serde_json::{json, Map, Value};

use super::calc;
use super::{ProgramFn, RawOutput};

pub(crate) fn builtin_functions() -> BTreeMap<String, ProgramFn> {
    let mut m: BTreeMap<String, ProgramFn> = BTreeMap::new();
    m.insert("calculator".into(), Arc::new(calculator));
    m.insert("unit_converter".into(), Arc::new(unit_converter));
    m.insert("date_calculator".into(), Arc::new(date_calculator));
    m.insert("string_transformer".into(), Arc::new(string_transformer));
    m.insert("maze_solver".into(), Arc::new(maze_solver));
    m
}

fn str_arg<'a>(args: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    args.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing string argument \"{key}\""))
}

pub fn calculator(args: &Map<String, Value>) -> Result<RawOutput, String> {
    let expr = str_arg(args, "expression")?;
    calc::evaluate(expr).map(|v| RawOutput::Text(calc::format_number(v)))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Dimension {
    Length,
    Mass,
    Time,
    Temperature,
}

/// Factor to the dimension's base unit (m, kg, s). Temperatures are handled separately.
fn unit(name: &str) -> Option<(Dimension, f64)> {
    use Dimension::*;
    Some(match name {
        "mm" => (Length, 0.001),
        "cm" => (Length, 0.01),
        "m" => (Length, 1.0),
        "km" => (Length, 1000.0),
        "in" => (Length, 0.0254),
        "ft" => (Length, 0.3048),
        "yd" => (Length, 0.9144),
        "mi" => (Length, 1609.344),
        "mg" => (Mass, 1e-6),
        "g" => (Mass, 0.001),
        "kg" => (Mass, 1.0),
        "oz" => (Mass, 0.028_349_523_125),
        "lb" => (Mass, 0.453_592_37),
        "s" => (Time, 1.0),
        "min" => (Time, 60.0),
        "h" => (Time, 3600.0),
        "day" => (Time, 86400.0),
        "c" | "f" | "k" => (Temperature, 1.0),
        _ => return None,
    })
}

pub fn unit_converter(args: &Map<String, Value>) -> Result<RawOutput, String> {
    let value = args
        .get("value")
        .and_then(Value::as_f64)
        .ok_or("missing numeric argument \"value\"")?;
    let from = str_arg(args, "from")?.to_lowercase();
    let to = str_arg(args, "to")?.to_lowercase();
    let (df, ff) = unit(&from).ok_or_else(|| format!("unknown unit \"{from}\""))?;
    let (dt, ft) = unit(&to).ok_or_else(|| format!("unknown unit \"{to}\""))?;
    if df != dt {
        return Err(format!(
            "cannot convert {from} to {to}: incompatible dimensions"
        ));
    }
    let out = if df == Dimension::Temperature {
        let kelvin = match from.as_str() {
            "c" => value + 273.15,
            "f" => (value - 32.0) * 5.0 / 9.0 + 273.15,
            _ => value,
        };
        match to.as_str() {
            "c" => kelvin - 273.15,
            "f" => (kelvin - 273.15) * 9.0 / 5.0 + 32.0,
            _ => kelvin,
        }
    } else {
        value * ff / ft
    };
    Ok(RawOutput::Json(json!(out)))
}

pub fn date_calculator(args: &Map<String, Value>) -> Result<RawOutput, String> {
    let base = str_arg(args, "base")?;
    let date = NaiveDate::parse_from_str(base, "%Y-%m-%d")
        .map_err(|e| format!("invalid date \"{base}\": {e}"))?;
    let days = args.get("add_days").and_then(Value::as_i64).unwrap_or(0);
    let shifted = date
        .checked_add_signed(Duration::days(days))
        .ok_or("date out of range")?;
    Ok(RawOutput::Text(shifted.format("%Y-%m-%d").to_string()))
}

pub fn string_transformer(args: &Map<String, Value>) -> Result<RawOutput, String> {
    let text = str_arg(args, "text")?;
    let op = str_arg(args, "operation")?;
    let out = match op {
        "upper" => text.to_uppercase(),
        "lower" => text.to_lowercase(),
        "reverse" => text.chars().rev().collect(),
        "trim" => text.trim().to_string(),
        "title" => text
            .split(' ')
            .map(|w| {
                let mut cs = w.chars();
                match cs.next() {
                    Some(first) => first
                        .to_uppercase()
                        .chain(cs.flat_map(char::to_lowercase))
                        .collect(),
                    None => String::new(),
                }
            })
            .collect::<Vec<String>>()
            .join(" "),
        "slug" => {
            let lowered: String = text
                .to_lowercase()
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { ' ' })
                .collect();
            lowered.split_whitespace().collect::<Vec<_>>().join("-")
        }
        other => return Err(format!("unknown operation \"{other}\"")),
    };
    Ok(RawOutput::Text(out))
}

/// Shortest path through a grid of `S` (start), `E` (exit), `#` (wall) and open cells.
pub fn maze_solver(args: &Map<String, Value>) -> Result<RawOutput, String> {
    let rows: Vec<Vec<char>> = args
        .get("grid")
        .and_then(Value::as_array)
        .ok_or("missing argument \"grid\"")?
        .iter()
        .map(|r| r.as_str().map(|s| s.chars().collect()))
        .collect::<Option<_>>()
        .ok_or("grid rows must be strings")?;
    let find = |target: char| {
        rows.iter()
            .enumerate()
            .find_map(|(r, row)| row.iter().position(|&c| c == target).map(|c| (r, c)))
    };
    let start = find('S').ok_or("grid has no start cell 'S'")?;
    let exit = find('E').ok_or("grid has no exit cell 'E'")?;

    // Neighbour order is fixed so the reported path is deterministic.
    const MOVES: [(i64, i64, char); 4] = [(-1, 0, 'U'), (1, 0, 'D'), (0, -1, 'L'), (0, 1, 'R')];
    let mut prev: BTreeMap<(usize, usize), ((usize, usize), char)> = BTreeMap::new();
    let mut queue = VecDeque::from([start]);
    let mut seen = std::collections::BTreeSet::from([start]);
    while let Some(cell) = queue.pop_front() {
        if cell == exit {
            break;
        }
        for (dr, dc, letter) in MOVES {
            let (r, c) = (cell.0 as i64 + dr, cell.1 as i64 + dc);
            if r < 0 || c < 0 {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            let open = rows
                .get(r)
                .and_then(|row| row.get(c))
                .is_some_and(|&ch| ch != '#');
            if open && seen.insert((r, c)) {
                prev.insert((r, c), (cell, letter));
                queue.push_back((r, c));
            }
        }
    }
    if !seen.contains(&exit) {
        return Ok(RawOutput::Json(
            json!({"solvable": false, "steps": null, "path": ""}),
        ));
    }
    let mut path = Vec::new();
    let mut cur = exit;
    while cur != start {
        let (p, letter) = prev[&cur];
        path.push(letter);
        cur = p;
    }
    path.reverse();
    Ok(RawOutput::Json(json!({
        "solvable": true,
        "steps": path.len(),
        "path": path.into_iter().collect::<String>(),
    })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn leap_day() {
        let out = date_calculator(&args(json!({"base": "2024-02-28", "add_days": 1}))).unwrap();
        assert_eq!(out, RawOutput::Text("2024-02-29".into()));
        let out = date_calculator(&args(json!({"base": "2023-02-28", "add_days": 1}))).unwrap();
        assert_eq!(out, RawOutput::Text("2023-03-01".into()));
    }

    #[test]
    fn conversions() {
        let out = unit_converter(&args(json!({"value": 1, "from": "km", "to": "m"}))).unwrap();
        assert_eq!(out, RawOutput::Json(json!(1000.0)));
        let RawOutput::Json(v) =
            unit_converter(&args(json!({"value": 100, "from": "c", "to": "f"}))).unwrap()
        else {
            panic!()
        };
        assert!((v.as_f64().unwrap() - 212.0).abs() < 1e-9);
        assert!(unit_converter(&args(json!({"value": 1, "from": "kg", "to": "m"}))).is_err());
    }

    #[test]
    fn strings() {
        let t = |op: &str, s: &str| {
            string_transformer(&args(json!({"text": s, "operation": op}))).unwrap()
        };
        assert_eq!(t("upper", "abc"), RawOutput::Text("ABC".into()));
        assert_eq!(t("reverse", "abc"), RawOutput::Text("cba".into()));
        assert_eq!(
            t("title", "hello wORLD"),
            RawOutput::Text("Hello World".into())
        );
        assert_eq!(
            t("slug", "Hello, World!"),
            RawOutput::Text("hello-world".into())
        );
    }

    #[test]
    fn maze() {
        let out = maze_solver(&args(json!({"grid": ["S.#", "..#", "#.E"]}))).unwrap();
        let RawOutput::Json(v) = out else { panic!() };
        assert_eq!(v["solvable"], true);
        assert_eq!(v["steps"], 4);
        assert_eq!(v["path"], "DRDR");
        let blocked = maze_solver(&args(json!({"grid": ["S#E"]}))).unwrap();
        assert_eq!(
            blocked,
            RawOutput::Json(json!({"solvable": false, "steps": null, "path": ""}))
        );
    }
}
