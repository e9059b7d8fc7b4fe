//! Trainable-parameter arithmetic at large-model scale.

use std::fmt::Write as _;

use promptlab::prompt::{trainable_param_count, InitOptions, PromptDims, PromptKind, PromptParams};
use promptlab::{Error, Result};

/// Named large-model dimension sets: `(name, e, c, b, h)`.
pub const PROFILES: &[(&str, usize, usize, usize, usize)] = &[
    ("t5-small", 512, 100, 10, 400),
    ("t5-base", 768, 100, 10, 400),
    ("t5-large", 1024, 100, 10, 400),
];

pub fn profile(name: &str) -> Result<PromptDims> {
    PROFILES
        .iter()
        .find(|p| p.0 == name)
        .map(|&(_, e, c, b, h)| PromptDims::new(e, c).with_bottleneck(b).with_hidden(h))
        .ok_or_else(|| {
            let known: Vec<_> = PROFILES.iter().map(|p| p.0).collect();
            Error::Usage(format!("unknown profile {name:?}; known: {}", known.join(", ")))
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountRow {
    pub kind: PromptKind,
    pub dims: PromptDims,
    pub count: usize,
    /// Count from enumerating a constructed parameterization, when verified.
    pub enumerated: Option<usize>,
}

impl CountRow {
    pub fn floor_k(&self) -> usize {
        self.count / 1000
    }

    pub fn nearest_k(&self) -> usize {
        (self.count + 500) / 1000
    }
}

pub fn count(kind: PromptKind, dims: PromptDims, verify: bool) -> Result<CountRow> {
    let count = trainable_param_count(kind, dims);
    let enumerated = if verify {
        let params = PromptParams::init(kind, dims, None, InitOptions::default(), 0)?;
        let n = params.trainable_count();
        if n != count {
            return Err(Error::Invariant(format!(
                "{kind}: formula gives {count} but the constructed parameters hold {n}"
            )));
        }
        Some(n)
    } else {
        None
    };
    Ok(CountRow {
        kind,
        dims,
        count,
        enumerated,
    })
}

pub fn render(rows: &[CountRow]) -> String {
    let mut out = String::from("method,e,c,b,h,trainable_params,floor_k,nearest_k,enumerated\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}K,{}K,{}",
            r.kind,
            r.dims.embed_dim,
            r.dims.length,
            r.dims.bottleneck,
            r.dims.hidden,
            r.count,
            r.floor_k(),
            r.nearest_k(),
            r.enumerated.map_or_else(|| "-".to_string(), |n| n.to_string())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_model_counts() {
        let expect = [
            ("t5-small", 51200, 6120, 462736),
            ("t5-base", 76800, 8680, 693904),
            ("t5-large", 102400, 11240, 925072),
        ];
        for (name, vanilla, dpt, residual) in expect {
            let dims = profile(name).unwrap();
            assert_eq!(count(PromptKind::Vanilla, dims, false).unwrap().count, vanilla);
            assert_eq!(count(PromptKind::Decomposed, dims, false).unwrap().count, dpt);
            assert_eq!(count(PromptKind::Residual, dims, false).unwrap().count, residual);
        }
    }

    #[test]
    fn rounding_reports_both_conventions() {
        let row = count(PromptKind::Decomposed, profile("t5-base").unwrap(), false).unwrap();
        assert_eq!((row.floor_k(), row.nearest_k()), (8, 9));
        let row = count(PromptKind::Residual, profile("t5-base").unwrap(), false).unwrap();
        assert_eq!((row.floor_k(), row.nearest_k()), (693, 694));
    }
}
