/// Result of one run on one sequence. `e_ate` is `None` for a failed run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub sequence: String,
    pub run: usize,
    pub e_ate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSummary {
    pub sequence: String,
    /// Median over successful runs; `None` when every run failed.
    pub median: Option<f64>,
    /// Per-run values indexed by run number; failed or missing runs are `None`.
    pub runs: Vec<Option<f64>>,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub sequences: Vec<SequenceSummary>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Groups outcomes by sequence in order of first appearance.
pub fn aggregate_runs(outcomes: &[RunOutcome]) -> Summary {
    let mut sequences: Vec<SequenceSummary> = Vec::new();
    for o in outcomes {
        let idx = match sequences.iter().position(|s| s.sequence == o.sequence) {
            Some(i) => i,
            None => {
                sequences.push(SequenceSummary {
                    sequence: o.sequence.clone(),
                    median: None,
                    runs: Vec::new(),
                    failures: 0,
                });
                sequences.len() - 1
            }
        };
        let s = &mut sequences[idx];
        if s.runs.len() <= o.run {
            s.runs.resize(o.run + 1, None);
        }
        s.runs[o.run] = o.e_ate;
        if o.e_ate.is_none() {
            s.failures += 1;
        }
    }
    for s in &mut sequences {
        let ok: Vec<f64> = s.runs.iter().flatten().copied().collect();
        s.median = median(&ok);
    }
    Summary { sequences }
}
