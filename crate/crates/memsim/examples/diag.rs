use memsim_core::logo_grpo::*;
use memsim_core::policy::PolicyParams;
use memsim_core::reward::{comp_penalty, RetrievalConfig};
use memsim_core::rng::{domain, mix};
use memsim_core::synth_env::{attribute_questions, generate_script, truncate_horizon, EnvConfig};

fn main() {
    let env = EnvConfig { sessions: 8, ..EnvConfig::default() };
    let script = generate_script(&env, 1).unwrap();
    let work = truncate_horizon(&script, 8).unwrap();
    let params = PolicyParams::random(1, 0.1);
    let cfg = RolloutConfig::default();
    let base = mix(99, domain::GLOBAL_ROLLOUT, 0);
    let rollouts: Vec<GlobalRollout> =
        (0..8).map(|i| run_global_rollout(&params, &work, i, base, &cfg)).collect();
    println!("cumulative tokens(8) = {}", work.cumulative_tokens(8));
    for r in &rollouts {
        let bank = &r.terminal_bank;
        let comp = comp_penalty(bank, &work, 8, 0.5).unwrap();
        println!(
            "rollout {}: entries {}, tokens {}, comp {:.4}",
            r.index,
            bank.entries.len(),
            bank.token_count(),
            comp
        );
    }
    let retrieval = RetrievalConfig::default();
    let rewards0 = global_rewards(&rollouts, &work, 0.5, 0.0, &retrieval).unwrap();
    let rewards5 = global_rewards(&rollouts, &work, 0.5, 0.5, &retrieval).unwrap();
    println!("t=1 row lambda=0:   {:?}", rewards0[0]);
    println!("t=1 row lambda=0.5: {:?}", rewards5[0]);
    let q = attribute_questions(&work);
    println!("qa buckets: {:?}", q.iter().map(|(t, v)| (*t, v.len())).collect::<Vec<_>>());
}
