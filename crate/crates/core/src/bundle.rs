// SPDX-License-Identifier: MIT OR Apache-2.0

//! Writes a complete fixture dataset plus a run config, so the report
//! pipeline can be exercised end to end without a model.
//!
//! Layout:
//!
//! ```text
//! config.json          run config pointing at everything below
//! fixture.json         the fixture config used
//! baseline.rscope      repeated list, n = 10
//! probe/repeated/      n = 3..=15
//! probe/unique/        n = 3..=13
//! per_n/               n in {7, 8, 9, 10, 11, 12, 15}
//! ablated/             same n, primary writer MLP zeroed (writer only)
//! attention/           baseline and one-intruder copies
//! behavior.json        outputs of the behavioral sweeps
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::behavior::{AccuracyRecord, EdgeCaseRecord};
use crate::container::write_trace;
use crate::decomp::{AblationSpec, Sublayer};
use crate::error::{Error, Result};
use crate::fixture::{apply_ablation, generate, generate_condition, FixtureConfig};
use crate::probes::ProbeCondition;
use crate::prompts::{
    Condition, Delimiter, DEFAULT_INTRUDER_POSITION, N_SWEEP, PER_N_SET, SWEEP_LIST_LEN,
};
use crate::report::{
    to_json, AblationInputs, AnomalyInputs, AttentionInputs, BehaviorInput, DecompInputs,
    LensInputs, ProbeInputs, RunConfig, SweepEntry,
};
use crate::trace::ActivationTrace;

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, text: String) -> Result<()> {
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn output(t: &ActivationTrace) -> Option<i64> {
    t.behavior.as_ref().and_then(|b| b.parsed_integer)
}

fn with_intruders(cfg: &FixtureConfig, positions: Vec<usize>) -> FixtureConfig {
    FixtureConfig {
        intruder_positions: positions,
        ..cfg.clone()
    }
}

fn behavior_input(cfg: &FixtureConfig) -> Result<BehaviorInput> {
    let n = SWEEP_LIST_LEN;
    let p1 = generate(cfg, n)?;
    let p2 = generate(&with_intruders(cfg, vec![DEFAULT_INTRUDER_POSITION]), n)?;
    let p3 = generate_condition(cfg, n, ProbeCondition::Unique)?;
    let accuracy = [
        (Condition::P1, &p1),
        (Condition::P2, &p2),
        (Condition::P3, &p3),
    ]
    .into_iter()
    .map(|(c, t)| AccuracyRecord {
        condition: c,
        delimiter: Delimiter::Space,
        output: output(t),
        expected: t.expected_count(),
    })
    .collect();
    let n_sweep = N_SWEEP
        .iter()
        .map(|&k| {
            Ok(SweepEntry {
                n: k as i64,
                output: output(&generate(cfg, k)?),
                expected: None,
            })
        })
        .collect::<Result<_>>()?;
    let intruder_positions = (0..n)
        .map(|p| Ok((p, output(&generate(&with_intruders(cfg, vec![p]), n)?))))
        .collect::<Result<_>>()?;
    let intruder_counts = (1..=5)
        .map(|k| {
            Ok((
                k,
                output(&generate(&with_intruders(cfg, (0..k).collect()), n)?),
            ))
        })
        .collect::<Result<_>>()?;
    let single = generate(cfg, 1)?;
    Ok(BehaviorInput {
        accuracy,
        n_sweep,
        intruder_positions,
        intruder_counts,
        expected_base: n as i64,
        edge_cases: vec![EdgeCaseRecord {
            label: "single".into(),
            output: output(&single),
            expected: 1,
        }],
    })
}

/// Writes the bundle into `dir` and returns the path of its `config.json`.
pub fn write_fixture_bundle(cfg: &FixtureConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = dir.as_ref();
    for sub in ["probe/repeated", "probe/unique", "per_n", "attention"] {
        mkdir(&dir.join(sub))?;
    }
    write_json(&dir.join("fixture.json"), to_json(cfg)?)?;

    let baseline = generate(cfg, SWEEP_LIST_LEN)?;
    write_trace(&baseline, dir.join("baseline.rscope"))?;
    for n in 3..=15 {
        write_trace(
            &generate(cfg, n)?,
            dir.join(format!("probe/repeated/n{n:02}.rscope")),
        )?;
    }
    for n in 3..=13 {
        let t = generate_condition(cfg, n, ProbeCondition::Unique)?;
        write_trace(&t, dir.join(format!("probe/unique/n{n:02}.rscope")))?;
    }
    for &n in &PER_N_SET {
        write_trace(
            &generate(cfg, n)?,
            dir.join(format!("per_n/n{n:02}.rscope")),
        )?;
    }
    let ablation = match &cfg.writer {
        Some(w) => {
            mkdir(&dir.join("ablated"))?;
            let spec = AblationSpec::zero(w.layer, Sublayer::Mlp);
            for &n in &PER_N_SET {
                let t = apply_ablation(cfg, &spec, n)?;
                write_trace(&t, dir.join(format!("ablated/n{n:02}.rscope")))?;
            }
            Some(AblationInputs {
                normal: "per_n".into(),
                ablated: "ablated".into(),
            })
        }
        None => None,
    };
    write_trace(&baseline, dir.join("attention/p1.rscope"))?;
    let p2 = generate(
        &with_intruders(cfg, vec![DEFAULT_INTRUDER_POSITION]),
        SWEEP_LIST_LEN,
    )?;
    write_trace(&p2, dir.join("attention/p2.rscope"))?;
    write_json(&dir.join("behavior.json"), to_json(&behavior_input(cfg)?)?)?;

    let config = RunConfig {
        model_id: Some(cfg.model_id.clone()),
        probe: Some(ProbeInputs {
            repeated: Some("probe/repeated".into()),
            unique: Some("probe/unique".into()),
        }),
        lens: Some(LensInputs {
            trace: "baseline.rscope".into(),
        }),
        decomp: Some(DecompInputs {
            per_n: Some("per_n".into()),
            ablation,
            ..DecompInputs::default()
        }),
        attention: Some(AttentionInputs {
            traces: Some("attention".into()),
            anomaly: Some(AnomalyInputs {
                p2: "attention/p2.rscope".into(),
                p1: "attention/p1.rscope".into(),
                intruder_pos: None,
                layers: vec![cfg.n_layers],
            }),
            ..AttentionInputs::default()
        }),
        behavior: Some("behavior.json".into()),
        ..RunConfig::default()
    };
    let path = dir.join("config.json");
    write_json(&path, to_json(&config)?)?;
    Ok(path)
}
