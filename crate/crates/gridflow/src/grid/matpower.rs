//! MATPOWER version-2 case text ingestion and re-emission.

use super::{Branch, Bus, BusKind, Generator, GridError, Network};
use std::collections::HashMap;

struct Row {
    line: usize,
    values: Vec<f64>,
}

/// Splits the case text into named matrices (`mpc.bus = [ ... ];`) and
/// scalars (`mpc.baseMVA = 100;`). Comments (`%`) and whitespace are free.
fn tokenize(text: &str) -> Result<(HashMap<String, Vec<Row>>, HashMap<String, f64>), GridError> {
    let mut tables: HashMap<String, Vec<Row>> = HashMap::new();
    let mut scalars: HashMap<String, f64> = HashMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('%').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = current.clone() {
            let body = content.trim_end_matches(';').trim();
            let closing = body.contains(']');
            let body = body.trim_end_matches(']').trim();
            if !body.is_empty() {
                for rowtext in body.split(';') {
                    let rowtext = rowtext.trim();
                    if rowtext.is_empty() {
                        continue;
                    }
                    let mut values = Vec::new();
                    for tok in rowtext.split_whitespace() {
                        let v = tok.parse::<f64>().map_err(|_| GridError::Parse {
                            line,
                            message: format!("invalid number `{tok}` in mpc.{name}"),
                        })?;
                        values.push(v);
                    }
                    tables.get_mut(&name).unwrap().push(Row { line, values });
                }
            }
            if closing {
                current = None;
            }
            continue;
        }
        if let Some(rest) = content.strip_prefix("mpc.") {
            let Some(eq) = rest.find('=') else { continue };
            let name = rest[..eq].trim().to_string();
            let rhs = rest[eq + 1..].trim();
            if rhs.starts_with('[') {
                tables.insert(name.clone(), Vec::new());
                let tail = rhs.trim_start_matches('[').trim();
                if !tail.is_empty() && tail != ";" {
                    // matrix opened and possibly populated on the same line
                    let body = tail.trim_end_matches(';').trim();
                    let closing = body.contains(']');
                    let body = body.trim_end_matches(']').trim();
                    for rowtext in body.split(';') {
                        let rowtext = rowtext.trim();
                        if rowtext.is_empty() {
                            continue;
                        }
                        let mut values = Vec::new();
                        for tok in rowtext.split_whitespace() {
                            let v = tok.parse::<f64>().map_err(|_| GridError::Parse {
                                line,
                                message: format!("invalid number `{tok}` in mpc.{name}"),
                            })?;
                            values.push(v);
                        }
                        tables.get_mut(&name).unwrap().push(Row { line, values });
                    }
                    if closing {
                        continue;
                    }
                }
                current = Some(name);
            } else if rhs.starts_with('\'') || rhs.starts_with('"') {
                // string fields such as mpc.version
            } else {
                let num = rhs.trim_end_matches(';').trim();
                let v = num.parse::<f64>().map_err(|_| GridError::Parse {
                    line,
                    message: format!("invalid scalar for mpc.{name}"),
                })?;
                scalars.insert(name, v);
            }
        }
    }
    Ok((tables, scalars))
}

/// Parses MATPOWER version-2 case text into a validated [`Network`].
/// Demands, shunts and injections are converted from MW/MVAr to per unit on
/// the system base. Bus type codes map 3 -> Slack, 2 -> PV, 1 -> PQ.
/// Out-of-service branches are retained with `in_service = false`;
/// out-of-service generators are dropped. Unsupported tables (gencost,
/// dcline, ...) are skipped with a warning.
pub fn parse_matpower_case(text: &str) -> Result<Network, GridError> {
    let (tables, scalars) = tokenize(text)?;
    for name in tables.keys() {
        if !matches!(name.as_str(), "bus" | "gen" | "branch") {
            log::warn!("skipping unsupported MATPOWER table mpc.{name}");
        }
    }
    let base_mva = *scalars
        .get("baseMVA")
        .ok_or_else(|| GridError::Validation("missing mpc.baseMVA".into()))?;
    let bus_rows = tables
        .get("bus")
        .ok_or_else(|| GridError::Validation("missing mpc.bus table".into()))?;
    let branch_rows = tables
        .get("branch")
        .ok_or_else(|| GridError::Validation("missing mpc.branch table".into()))?;
    let gen_rows = tables
        .get("gen")
        .ok_or_else(|| GridError::Validation("missing mpc.gen table".into()))?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut index_of: HashMap<usize, usize> = HashMap::new();
    for row in bus_rows {
        if row.values.len() < 13 {
            return Err(GridError::Parse {
                line: row.line,
                message: format!("bus row has {} columns, expected 13", row.values.len()),
            });
        }
        let original_id = row.values[0] as usize;
        let kind = match row.values[1] as i64 {
            3 => BusKind::Slack,
            2 => BusKind::Pv,
            1 => BusKind::Pq,
            other => {
                return Err(GridError::Parse {
                    line: row.line,
                    message: format!("unknown bus type code {other}"),
                })
            }
        };
        let id = buses.len();
        if index_of.insert(original_id, id).is_some() {
            return Err(GridError::Validation(format!(
                "duplicate bus id {original_id}"
            )));
        }
        buses.push(Bus {
            id,
            original_id,
            kind,
            p_demand: row.values[2] / base_mva,
            q_demand: row.values[3] / base_mva,
            v_setpoint: row.values[7],
            theta_setpoint: row.values[8].to_radians(),
            shunt_g: row.values[4] / base_mva,
            shunt_b: row.values[5] / base_mva,
        });
    }

    let mut generators = Vec::new();
    for row in gen_rows {
        if row.values.len() < 10 {
            return Err(GridError::Parse {
                line: row.line,
                message: format!("gen row has {} columns, expected 10", row.values.len()),
            });
        }
        if row.values[7] <= 0.0 {
            continue; // out-of-service generator
        }
        let bus = *index_of
            .get(&(row.values[0] as usize))
            .ok_or_else(|| GridError::Parse {
                line: row.line,
                message: format!("gen references unknown bus {}", row.values[0]),
            })?;
        generators.push(Generator {
            bus,
            p_gen: row.values[1] / base_mva,
            q_gen: row.values[2] / base_mva,
            v_setpoint: row.values[5],
        });
    }
    // Generator voltage setpoints drive the bus setpoint at PV/slack buses;
    // the first in-service generator at a bus wins.
    let mut seen = vec![false; buses.len()];
    for g in &generators {
        if !seen[g.bus] {
            seen[g.bus] = true;
            if buses[g.bus].kind != BusKind::Pq {
                buses[g.bus].v_setpoint = g.v_setpoint;
            }
        }
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in branch_rows {
        if row.values.len() < 13 {
            return Err(GridError::Parse {
                line: row.line,
                message: format!("branch row has {} columns, expected 13", row.values.len()),
            });
        }
        let from_bus = *index_of
            .get(&(row.values[0] as usize))
            .ok_or_else(|| GridError::Parse {
                line: row.line,
                message: format!("branch references unknown bus {}", row.values[0]),
            })?;
        let to_bus = *index_of
            .get(&(row.values[1] as usize))
            .ok_or_else(|| GridError::Parse {
                line: row.line,
                message: format!("branch references unknown bus {}", row.values[1]),
            })?;
        let ratio = row.values[8];
        branches.push(Branch {
            from_bus,
            to_bus,
            r: row.values[2],
            x: row.values[3],
            b_charging: row.values[4],
            tap: if ratio == 0.0 { 1.0 } else { ratio },
            shift: row.values[9].to_radians(),
            in_service: row.values[10] > 0.0,
        });
    }

    let net = Network {
        buses,
        branches,
        generators,
        base_mva,
    };
    net.validate()?;
    Ok(net)
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Re-emits a [`Network`] as MATPOWER version-2 case text. Fields not carried
/// by the data model are written as zeros; numeric values round-trip exactly
/// through [`parse_matpower_case`].
pub fn serialize_matpower_case(net: &Network) -> String {
    let mut out = String::new();
    out.push_str("function mpc = case\nmpc.version = '2';\n");
    out.push_str(&format!("mpc.baseMVA = {};\n", fmt(net.base_mva)));
    out.push_str("mpc.bus = [\n");
    for b in &net.buses {
        let kind = match b.kind {
            BusKind::Slack => 3,
            BusKind::Pv => 2,
            BusKind::Pq => 1,
        };
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t0\t1\t0\t0;\n",
            b.original_id,
            kind,
            fmt(b.p_demand * net.base_mva),
            fmt(b.q_demand * net.base_mva),
            fmt(b.shunt_g * net.base_mva),
            fmt(b.shunt_b * net.base_mva),
            fmt(b.v_setpoint),
            fmt(b.theta_setpoint.to_degrees()),
        ));
    }
    out.push_str("];\nmpc.gen = [\n");
    for g in &net.generators {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t0\t0\t{}\t{}\t1\t0\t0;\n",
            net.buses[g.bus].original_id,
            fmt(g.p_gen * net.base_mva),
            fmt(g.q_gen * net.base_mva),
            fmt(g.v_setpoint),
            fmt(net.base_mva),
        ));
    }
    out.push_str("];\nmpc.branch = [\n");
    for br in &net.branches {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t{}\t0\t0;\n",
            net.buses[br.from_bus].original_id,
            net.buses[br.to_bus].original_id,
            fmt(br.r),
            fmt(br.x),
            fmt(br.b_charging),
            fmt(br.tap),
            fmt(br.shift.to_degrees()),
            if br.in_service { 1 } else { 0 },
        ));
    }
    out.push_str("];\n");
    out
}
