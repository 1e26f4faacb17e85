//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod oracles;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use forklab::crypto::{CryptoProvider, ToyCrypto};
use forklab::host::{AttackKind, Event, Evidence};
use forklab::ledger::{ConsensusMode, Ledger};
use forklab::mitigations::serialization::{StateCommit, StateCommitValidator, STATE_COMMIT_KIND};
use forklab::protocols::{self, phala, pol, secret, twilight, ProtocolId, RunContext, Variant};
use forklab::scenarios::report::{render_matrix, render_scenario, Format};
use forklab::scenarios::{load_corpus, run_matrix, run_scenario, run_trials, ScenarioConfig};
use forklab::value::Value;

type Check = Result<String, String>;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(rel: &str) -> ScenarioConfig {
    ScenarioConfig::load(&corpus().join(rel)).unwrap_or_else(|e| panic!("{e}"))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn golden_matrix() -> Check {
    let start = Instant::now();
    let configs: Vec<_> = load_corpus(&corpus()).map_err(|e| e.to_string())?.into_iter().map(|(_, c)| c).collect();
    let m = run_matrix(&configs).map_err(|e| e.to_string())?;
    let bad = m.mismatches();
    ensure(bad.is_empty(), || bad.join("; "))?;
    let cli = Command::new(env!("CARGO_BIN_EXE_forklab"))
        .args(["matrix", "--expect", "--corpus"])
        .arg(corpus())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(cli.status.code() == Some(0), || format!("forklab matrix --expect exited {:?}", cli.status.code()))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} rows match, library + CLI in {:.1}s", m.rows.len(), elapsed.as_secs_f64()))
}

fn final_digests(cfg: &ScenarioConfig) -> Result<BTreeSet<String>, String> {
    let r = run_scenario(cfg).map_err(|e| e.to_string())?;
    Ok(r.log
        .entries()
        .iter()
        .filter_map(|e| match &e.event {
            Event::FinalState { digest, .. } => Some(digest.clone()),
            _ => None,
        })
        .collect())
}

fn digest_of(s: i64) -> String {
    hex::encode(ToyCrypto.hash(&Value::Int(s).encode()))
}

fn state_machine() -> Check {
    let (s0, i1, i2) = (1, 5, 7);
    let rollback = final_digests(&load("state-machine/rollback.toml"))?;
    let want = BTreeSet::from([digest_of(oracles::fold(s0, &[i2]))]);
    ensure(rollback == want, || format!("rollback ended in {rollback:?}, want {want:?}"))?;
    ensure(!rollback.contains(&digest_of(oracles::fold(s0, &[i1, i2]))), || "rollback kept i1".into())?;
    let cloning = final_digests(&load("state-machine/cloning.toml"))?;
    let want = BTreeSet::from([digest_of(oracles::fold(s0, &[i1])), digest_of(oracles::fold(s0, &[i2]))]);
    ensure(cloning == want, || format!("cloning ended in {cloning:?}, want {want:?}"))?;
    Ok("rollback = {f(s0,i2)}, cloning = {f(s0,i1), f(s0,i2)}".into())
}

fn phala_calibration() -> Check {
    let mean = phala::mean_senders(3, 400, 2000).map_err(|e| e.to_string())?;
    ensure((18.5..=21.5).contains(&mean), || format!("mean senders {mean}"))?;
    ensure((mean - oracles::expected_senders(400, 20)).abs() <= 1.5, || format!("mean senders {mean} vs oracle"))?;
    // A single worker beats about once every 20 blocks; a long chain keeps the
    // gap estimate's own noise well under the tolerance.
    let gap = phala::worker_gap_ms(3, 400, 20_000).map_err(|e| e.to_string())?;
    let oracle = oracles::expected_gap_ms(400, 20, phala::BLOCK_INTERVAL_MS);
    ensure((oracle - 45_000.0).abs() < 1e-9, || format!("oracle gap {oracle}"))?;
    ensure((gap - 45_000.0).abs() <= 4_500.0, || format!("gap {gap} ms"))?;
    Ok(format!("{mean:.2} heartbeats/block, gap {:.1} s", gap / 1000.0))
}

fn cloning_statistics() -> Check {
    const N: u64 = 10_000;
    const TOL: f64 = 0.02;
    let cases = [
        ("trials/pouw-c4-p02.toml", oracles::any_of(4, 0.2), oracles::any_of_mc(101, N as u32, 4, 0.2)),
        ("trials/fastkitten-c2-k4.toml", oracles::favored_win(2, 4), oracles::favored_win_mc(202, N as u32, 2, 4)),
        ("trials/ten-c2-m8.toml", oracles::lowest_nonce(2, 8), oracles::lowest_nonce_mc(303, N as u32, 2, 8)),
        ("trials/ten-c1-m8.toml", oracles::lowest_nonce(1, 8), oracles::lowest_nonce_mc(404, N as u32, 1, 8)),
    ];
    let mut parts = Vec::new();
    for (file, closed, mc) in cases {
        let cfg = load(file);
        let t = run_trials(&cfg, N).map_err(|e| e.to_string())?;
        let got = t.rounds.frequency;
        ensure(t.rounds.trials == N, || format!("{file}: {} rounds", t.rounds.trials))?;
        ensure((got - closed).abs() <= TOL, || format!("{file}: {got:.4} vs closed form {closed:.4}"))?;
        ensure((mc - closed).abs() <= TOL, || format!("{file}: oracle MC {mc:.4} vs closed form {closed:.4}"))?;
        parts.push(format!("{} {got:.4} (oracle {closed:.4})", cfg.name));
    }
    ensure((oracles::any_of(4, 0.2) - 0.5904).abs() < 1e-12, || "PoUW closed form".into())?;
    ensure((oracles::favored_win(2, 4) - 0.4375).abs() < 1e-12, || "FastKitten closed form".into())?;
    ensure((oracles::lowest_nonce(2, 8) - 0.2).abs() < 1e-12, || "Ten closed form".into())?;
    Ok(parts.join(", "))
}

fn exclusivity() -> Check {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner
        .run(&(any::<u64>(), 0usize..4), |(seed, clones)| {
            let n = twilight::claimers(seed, clones).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(n, 1);
            Ok(())
        })
        .map_err(|e| format!("twilight: {e}"))?;

    runner
        .run(&(any::<u64>(), 1usize..=8), |(seed, c)| {
            let pol::PolNet { mut sim, miner, platform } =
                pol::setup(seed, ConsensusMode::permissioned(), true).map_err(|e| TestCaseError::fail(e.to_string()))?;
            sim.next_block();
            let blob = sim.blobs_of(miner).map_err(|e| TestCaseError::fail(e.to_string()))?.last().cloned();
            let mut instances = vec![miner];
            for _ in 1..c {
                instances.push(sim.clone_instance(miner, blob.as_ref()).map_err(|e| TestCaseError::fail(e.to_string()))?);
            }
            let head = (sim.ledger.head().hash, sim.ledger.head().height);
            let r = pol::play_round(&mut sim, &instances, 0, head).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let on_chain = sim.ledger.validator::<pol::PolValidator>(pol::KIND).map_or(0, |v| v.accepted(&platform, 0));
            prop_assert!(r.accepted <= 1 && on_chain <= 1, "c = {}: {} accepted", c, on_chain);
            Ok(())
        })
        .map_err(|e| format!("proof of luck: {e}"))?;

    let ops = proptest::collection::vec((0u8..4, any::<prop::sample::Index>(), any::<bool>()), 1..40);
    runner
        .run(&(any::<u64>(), ops), |(seed, ops)| {
            let crypto = Arc::new(ToyCrypto);
            let mut ledger = Ledger::new(crypto.clone(), ConsensusMode::permissioned(), seed);
            let genesis = crypto.hash(b"contract genesis");
            let mut v = StateCommitValidator::new(1);
            v.register_contract("c", genesis);
            ledger.register_tx_validator(STATE_COMMIT_KIND, Box::new(v)).unwrap();
            let mut seen = vec![genesis];
            let mut anchors = vec![ledger.head().hash];
            for (i, (kind, pick, advance)) in ops.into_iter().enumerate() {
                let head = ledger.validator::<StateCommitValidator>(STATE_COMMIT_KIND).unwrap().head("c").unwrap();
                let prev = if kind == 0 { *pick.get(&seen) } else { head };
                let anchor = if kind == 1 { *pick.get(&anchors) } else { ledger.head().hash };
                let new = crypto.hash(format!("state {i}").as_bytes());
                seen.push(new);
                let _ = ledger.submit_tx(forklab::ledger::Tx::new(
                    STATE_COMMIT_KIND,
                    StateCommit { contract: "c".into(), prev, new, anchor }.to_value(),
                ));
                if advance {
                    ledger.advance(1_000);
                    anchors.push(ledger.head().hash);
                }
            }
            let accepted = ledger.validator::<StateCommitValidator>(STATE_COMMIT_KIND).unwrap().accepted().to_vec();
            let mut expect_prev = genesis;
            for c in &accepted {
                prop_assert_eq!(c.prev, expect_prev);
                expect_prev = c.new;
            }
            let prevs: BTreeSet<_> = accepted.iter().map(|c| c.prev).collect();
            prop_assert_eq!(prevs.len(), accepted.len());
            Ok(())
        })
        .map_err(|e| format!("state on ledger: {e}"))?;
    Ok("1000 cases each: twilight one claimer, PoL c in 1..=8 at most one proof, single commit chain".into())
}

fn secret_queries() -> Check {
    let crypto = ToyCrypto;
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner
        .run(&(any::<[u8; 32]>(), any::<[u8; 32]>(), any::<[u8; 32]>()), |(a, b, nonce)| {
            let client = crypto.keypair_from_seed(&a);
            let consensus = crypto.keypair_from_seed(&b);
            prop_assert_eq!(
                secret::client_key(&crypto, &client, &consensus.public, &nonce),
                secret::enclave_key(&crypto, &consensus, &client.public, &nonce)
            );
            Ok(())
        })
        .map_err(|e| format!("key symmetry: {e}"))?;
    for seed in 0..1000 {
        let v = protocols::run(ProtocolId::SecretQuery, &RunContext::new(seed, Variant::Vulnerable, AttackKind::Cloning))
            .map_err(|e| e.to_string())?;
        let want = vec![Evidence::StaleResponseAccepted { expected: "2".into(), got: "1".into() }];
        ensure(v.outcome.evidence == want, || format!("seed {seed} vulnerable: {:?}", v.outcome.evidence))?;
        let p = protocols::run(ProtocolId::SecretQuery, &RunContext::new(seed, Variant::Patched, AttackKind::Cloning))
            .map_err(|e| e.to_string())?;
        ensure(p.outcome.evidence == vec![Evidence::AddressMismatch], || format!("seed {seed} patched: {:?}", p.outcome.evidence))?;
    }
    Ok("k agrees on 1000 samples; rewrite returns 1 (fresh 2) vulnerable, AddressMismatch patched, 1000/1000 seeds".into())
}

fn fork_divergence() -> Check {
    for seed in 0..1000 {
        let v = protocols::run(ProtocolId::BiteFork, &RunContext::new(seed, Variant::Vulnerable, AttackKind::Cloning))
            .map_err(|e| e.to_string())?;
        ensure(
            v.outcome.succeeded && matches!(v.outcome.evidence[..], [Evidence::DivergentResponses { .. }]),
            || format!("seed {seed} vulnerable: {:?}", v.outcome.evidence),
        )?;
        let p = protocols::run(ProtocolId::BiteFork, &RunContext::new(seed, Variant::Patched, AttackKind::Cloning))
            .map_err(|e| e.to_string())?;
        ensure(
            !p.outcome.succeeded && matches!(p.outcome.evidence[..], [Evidence::RejectForkMismatch { .. }]),
            || format!("seed {seed} patched: {:?}", p.outcome.evidence),
        )?;
    }
    Ok("DivergentResponses vulnerable, RejectForkMismatch patched, 1000/1000 seeds".into())
}

fn determinism() -> Check {
    let configs: Vec<_> = load_corpus(&corpus()).map_err(|e| e.to_string())?;
    let mut runs = 0;
    for (path, cfg) in configs.iter().filter(|(_, c)| c.trials.is_none()) {
        let a = run_scenario(cfg).map_err(|e| e.to_string())?;
        let b = run_scenario(cfg).map_err(|e| e.to_string())?;
        ensure(a.log.to_jsonl() == b.log.to_jsonl(), || format!("{}: logs differ", path.display()))?;
        for f in [Format::Json, Format::Md, Format::Csv] {
            ensure(render_scenario(&a, f) == render_scenario(&b, f), || format!("{}: {f:?} reports differ", path.display()))?;
        }
        runs += 1;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = corpus().join("phala-worker/vulnerable-cloning.toml");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("r{i}.json"));
        let log = dir.path().join(format!("l{i}.jsonl"));
        let status = Command::new(env!("CARGO_BIN_EXE_forklab"))
            .arg("run")
            .arg(&file)
            .arg("--out")
            .arg(&out)
            .arg("--log")
            .arg(&log)
            .env_remove(forklab::scenarios::SEED_ENV)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("forklab run exited {status}"))?;
        outputs.push((std::fs::read(&out).map_err(|e| e.to_string())?, std::fs::read(&log).map_err(|e| e.to_string())?));
    }
    ensure(outputs[0] == outputs[1], || "CLI outputs differ between runs".into())?;

    let base: Vec<_> = configs.iter().map(|(_, c)| c.clone()).collect();
    let reference = run_matrix(&base).map_err(|e| e.to_string())?;
    ensure(render_matrix(&reference, Format::Json) == render_matrix(&run_matrix(&base).map_err(|e| e.to_string())?, Format::Json), || {
        "matrix reports differ".into()
    })?;
    for seed in 1..=20u64 {
        let swept: Vec<_> = base.iter().cloned().map(|mut c| {
            c.seed = seed;
            c
        }).collect();
        let m = run_matrix(&swept).map_err(|e| e.to_string())?;
        ensure(m.pattern() == reference.pattern(), || format!("seed {seed}: {:?}", m.mismatches()))?;
    }
    Ok(format!("{runs} scenarios byte-identical twice, CLI files identical, matrix fixed over 20 seeds"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("golden matrix", golden_matrix),
        ("state-machine forking", state_machine),
        ("phala heartbeat calibration", phala_calibration),
        ("cloning advantage statistics", cloning_statistics),
        ("exclusivity invariants", exclusivity),
        ("secret query contract", secret_queries),
        ("fork divergence", fork_divergence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
