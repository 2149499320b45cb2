use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetAdapter, IngestError, Split, Transaction, UserHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// Header row plus delimited records (delimiter from the adapter).
    Delimited,
    /// One JSON object per line.
    JsonLines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number in the input (the header is line 1).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub histories: Vec<UserHistory>,
    pub row_errors: Vec<RowError>,
    pub total_rows: usize,
}

type RawRow = (usize, Vec<Option<String>>);

struct RawEvent {
    clock: i64,
    txn: Transaction,
}

#[derive(Clone, Copy)]
struct Slots {
    user: usize,
    ts: usize,
    amount: usize,
    mcc: Option<usize>,
    txn_type: Option<usize>,
    currency: Option<usize>,
    label: Option<usize>,
}

/// Parses a transaction log into canonical per-user histories.
///
/// Malformed rows are collected with their line number; the call fails when
/// more than half of the rows are malformed.
pub fn parse_transactions(
    text: &str,
    format: InputFormat,
    adapter: &DatasetAdapter,
) -> Result<ParseOutcome, IngestError> {
    adapter.validate()?;
    let c = &adapter.columns;
    let names: Vec<&str> = {
        let mut v = vec![c.user_id.as_str(), c.timestamp.as_str(), c.amount.as_str()];
        for o in [&c.mcc_code, &c.txn_type, &c.currency, &c.label] {
            v.push(o.as_deref().unwrap_or(""));
        }
        v
    };
    let opt = |i: usize| (!names[i].is_empty()).then_some(i);
    let slots = Slots {
        user: 0,
        ts: 1,
        amount: 2,
        mcc: opt(3),
        txn_type: opt(4),
        currency: opt(5),
        label: opt(6),
    };

    // (line, cells aligned with `names`) or a row-level error
    let mut rows: Vec<Result<RawRow, RowError>> = Vec::new();
    match format {
        InputFormat::Delimited => {
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(u8::try_from(adapter.delimiter).map_err(|_| {
                    IngestError::Adapter("delimiter must be a single-byte character".into())
                })?)
                .has_headers(true)
                .flexible(true)
                .from_reader(text.as_bytes());
            let header = rdr.headers()?.clone();
            let mut index = Vec::with_capacity(names.len());
            for name in &names {
                if name.is_empty() {
                    index.push(None);
                    continue;
                }
                let pos = header
                    .iter()
                    .position(|h| h.trim() == *name)
                    .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
                index.push(Some(pos));
            }
            for (k, rec) in rdr.records().enumerate() {
                let line = k + 2;
                match rec {
                    Ok(rec) => {
                        let line = rec.position().map(|p| p.line() as usize).unwrap_or(line);
                        let cells = index
                            .iter()
                            .map(|ix| ix.and_then(|i| rec.get(i)).map(|s| s.trim().to_string()))
                            .collect();
                        rows.push(Ok((line, cells)));
                    }
                    Err(e) => rows.push(Err(RowError { row: line, message: e.to_string() })),
                }
            }
        }
        InputFormat::JsonLines => {
            let mut saw_object = false;
            for (k, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row = k + 1;
                let obj = match serde_json::from_str::<serde_json::Value>(line) {
                    Ok(serde_json::Value::Object(m)) => m,
                    Ok(_) => {
                        rows.push(Err(RowError { row, message: "record is not a JSON object".into() }));
                        continue;
                    }
                    Err(e) => {
                        rows.push(Err(RowError { row, message: e.to_string() }));
                        continue;
                    }
                };
                if !saw_object {
                    saw_object = true;
                    for name in names.iter().filter(|n| !n.is_empty()) {
                        if !obj.contains_key(*name) {
                            return Err(IngestError::MissingColumn(name.to_string()));
                        }
                    }
                }
                let cells = names
                    .iter()
                    .map(|name| match obj.get(*name) {
                        None | Some(serde_json::Value::Null) => None,
                        Some(serde_json::Value::String(s)) => Some(s.trim().to_string()),
                        Some(v) => Some(v.to_string()),
                    })
                    .collect();
                rows.push(Ok((row, cells)));
            }
        }
    }

    let total_rows = rows.len();
    let mut row_errors = Vec::new();
    let mut users: BTreeMap<String, (Vec<RawEvent>, Option<String>)> = BTreeMap::new();
    for row in rows {
        let (line, cells) = match row {
            Ok(r) => r,
            Err(e) => {
                row_errors.push(e);
                continue;
            }
        };
        match parse_row(&cells, slots, adapter) {
            Ok((ev, label)) => {
                let entry = users.entry(ev.txn.user_id.clone()).or_default();
                if let Some(l) = label {
                    match &entry.1 {
                        Some(prev) if *prev != l => {
                            row_errors.push(RowError {
                                row: line,
                                message: format!("conflicting label `{l}` (user already labeled `{prev}`)"),
                            });
                            continue;
                        }
                        _ => entry.1 = Some(l),
                    }
                }
                entry.0.push(ev);
            }
            Err(message) => row_errors.push(RowError { row: line, message }),
        }
    }

    if total_rows > 0 && row_errors.len() * 2 > total_rows {
        let first = &row_errors[0];
        return Err(IngestError::TooManyMalformed {
            malformed: row_errors.len(),
            total: total_rows,
            first_row: first.row,
            first_message: first.message.clone(),
        });
    }

    let dataset_end = users
        .values()
        .flat_map(|(evs, _)| evs.iter().map(|e| e.clock))
        .max()
        .unwrap_or(0);
    let histories = users
        .into_iter()
        .map(|(user_id, (mut events, label))| {
            // stable: ties keep input order
            events.sort_by_key(|e| e.clock);
            let start = events[0].clock;
            let transactions = events
                .into_iter()
                .map(|e| Transaction { ts: e.clock - start, ..e.txn })
                .collect();
            UserHistory {
                user_id,
                transactions,
                split: if label.is_some() { Split::Train } else { Split::Unlabeled },
                label,
                anchor_epoch: Some(start),
                horizon: Some(dataset_end - start),
            }
        })
        .collect();
    Ok(ParseOutcome { histories, row_errors, total_rows })
}

fn parse_row(
    cells: &[Option<String>],
    slots: Slots,
    adapter: &DatasetAdapter,
) -> Result<(RawEvent, Option<String>), String> {
    let cell = |i: usize| cells.get(i).and_then(|c| c.as_deref()).filter(|s| !s.is_empty());
    let user_id = cell(slots.user).ok_or("empty user id")?.to_string();
    let clock = adapter
        .timestamp
        .to_seconds(cell(slots.ts).ok_or("empty timestamp")?)?;
    let raw_amount = cell(slots.amount).ok_or("empty amount")?;
    let amount: f64 = raw_amount
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| format!("unparseable amount `{raw_amount}`"))?;
    let mcc_code = match slots.mcc.and_then(cell) {
        None => None,
        Some(s) => {
            let v: f64 = s.parse().map_err(|_| format!("unparseable mcc code `{s}`"))?;
            if v.fract() != 0.0 || !(0.0..=9999.0).contains(&v) {
                return Err(format!("mcc code `{s}` outside [0, 9999]"));
            }
            Some(v as u16)
        }
    };
    let txn_type = slots.txn_type.and_then(cell).map(String::from);
    let currency = slots.currency.and_then(cell).map(String::from);
    let label = slots.label.and_then(cell).map(String::from);
    let amount = adapter.amount_sign.apply(amount, txn_type.as_deref());
    let txn = Transaction { user_id, ts: 0, mcc_code, amount, txn_type, currency };
    Ok((RawEvent { clock, txn }, label))
}

/// Joins labels from a separate delimited file (columns from the adapter's
/// `labels` section). Returns the number of histories that received a label.
pub fn attach_labels(
    histories: &mut [UserHistory],
    labels_text: &str,
    adapter: &DatasetAdapter,
) -> Result<usize, IngestError> {
    let cols = adapter
        .labels
        .clone()
        .or_else(|| {
            adapter.columns.label.clone().map(|label| super::LabelColumns {
                user_id: adapter.columns.user_id.clone(),
                label,
            })
        })
        .ok_or_else(|| IngestError::Schema(format!("adapter `{}` declares no label columns", adapter.name)))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(adapter.delimiter as u8)
        .from_reader(labels_text.as_bytes());
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let (ui, li) = (find(&cols.user_id)?, find(&cols.label)?);
    let mut labels = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if let (Some(u), Some(l)) = (rec.get(ui), rec.get(li)) {
            if !l.trim().is_empty() {
                labels.insert(u.trim().to_string(), l.trim().to_string());
            }
        }
    }
    let mut n = 0;
    for h in histories.iter_mut() {
        if let Some(l) = labels.get(&h.user_id) {
            h.label = Some(l.clone());
            h.split = Split::Train;
            n += 1;
        }
    }
    Ok(n)
}
