//! Tab-separated buffer snapshots, one transition per line:
//! `tag, s0..s{d-1}, action, raw_reward, shaped_reward, ns0..ns{d-1}, done`.

use std::io::{Read, Write};

use crate::envs::{ActionId, State};
use crate::error::{Error, Result};
use crate::transition::{EpisodeTag, Transition};

pub fn header(state_dim: usize) -> Vec<String> {
    let mut cols = vec!["tag".to_string()];
    cols.extend((0..state_dim).map(|i| format!("s{i}")));
    cols.extend(["action", "raw_reward", "shaped_reward"].map(String::from));
    cols.extend((0..state_dim).map(|i| format!("ns{i}")));
    cols.push("done".into());
    cols
}

pub fn write<W: Write>(out: W, transitions: &[Transition]) -> Result<()> {
    let state_dim = transitions.first().map_or(0, |t| t.state.len());
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    w.write_record(header(state_dim))?;
    for t in transitions {
        if t.state.len() != state_dim || t.next_state.len() != state_dim {
            return Err(Error::WidthMismatch {
                expected: state_dim,
                actual: t.state.len(),
            });
        }
        let mut row = vec![t.tag.0.to_string()];
        row.extend(t.state.values().iter().map(f64::to_string));
        row.push(t.action.0.to_string());
        row.push(t.raw_reward.to_string());
        row.push(t.shaped_reward.to_string());
        row.extend(t.next_state.values().iter().map(f64::to_string));
        row.push(u8::from(t.done).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(input: R) -> Result<Vec<Transition>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(input);
    let head = r.headers()?.clone();
    let width = head.len();
    if width < 5 || (width - 5) % 2 != 0 {
        return Err(Error::InvalidInput(format!("snapshot header has {width} columns")));
    }
    let d = (width - 5) / 2;
    let expected = header(d);
    if head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidInput("snapshot header does not match the transition layout".into()));
    }

    let mut out = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let bad = |col: usize| Error::InvalidInput(format!("row {}: cannot parse column `{}`", line + 1, expected[col]));
        let num = |col: usize| record[col].parse::<f64>().map_err(|_| bad(col));
        let int = |col: usize| record[col].parse::<u64>().map_err(|_| bad(col));
        let state = (1..=d).map(num).collect::<Result<Vec<_>>>()?;
        let next_state = (d + 4..2 * d + 4).map(num).collect::<Result<Vec<_>>>()?;
        out.push(Transition {
            tag: EpisodeTag(int(0)?),
            state: State(state),
            action: ActionId(int(d + 1)? as usize),
            raw_reward: num(d + 2)?,
            shaped_reward: num(d + 3)?,
            next_state: State(next_state),
            done: match &record[2 * d + 4] {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad(2 * d + 4)),
            },
        });
    }
    Ok(out)
}
