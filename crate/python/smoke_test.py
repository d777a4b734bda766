"""Smoke test of the Python bindings.

Build and install the extension first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run ``python python/smoke_test.py``.
"""

import json
import math
import tempfile
from pathlib import Path

import pimaex


def check_env():
    env = pimaex.Env(json.dumps({"episode_len": 20, "explores_per_level": 5}))
    obs = env.reset(0)
    assert len(obs) == env.n_agents == 4
    assert obs[0] == [0.0, 1.0, 1.0, 0.0, 0.0]
    total = 0.0
    done = False
    steps = 0
    while not done:
        obs, rewards, done = env.step([2, 2, 1, 1])
        total += sum(rewards)
        steps += 1
    assert steps == 20
    state = json.loads(env.state_json())
    assert state["yield_level"] > 1, state
    try:
        env.step([0, 0, 0, 0])
    except ValueError:
        pass
    else:
        raise AssertionError("stepping a finished episode must fail")
    print(f"env: 20 steps, joint return {total}, level {state['yield_level']}")


def check_network():
    net = pimaex.Network(seed=3)
    msg = [0.0] * net.message_dim
    env_logits, comm_logits, values = net.forward([0.0, 1.0, 1.0, 0.0, 0.0], msg)
    assert len(env_logits) == 3 and len(comm_logits) == 8 and len(values) == 3
    again = pimaex.Network.from_json(net.to_json())
    assert again.forward([0.0, 1.0, 1.0, 0.0, 0.0], msg) == (env_logits, comm_logits, values)

    pairs = net.influences([0.2, 1.0, 0.5, 0.0, 0.1], [1, 2, 3, 4], target=0, action=1)
    assert sorted(p["source"] for p in pairs) == [1, 2, 3]
    assert all(p["pi_kl"] >= 0.0 for p in pairs)
    net.zero_message_weights()
    blind = net.influences([0.2, 1.0, 0.5, 0.0, 0.1], [1, 2, 3, 4], target=0, action=1)
    assert all(abs(p["pi_kl"]) < 1e-9 and abs(p["vi_int"]) < 1e-9 for p in blind)
    print(f"network: {net.param_count} parameters, {len(pairs)} influence pairs")


def check_math():
    p, q = [0.5, 0.5], [0.25, 0.75]
    kl = pimaex.policy_influence_kl(p, q)
    assert abs(kl - (0.5 * math.log(2) + 0.5 * math.log(2 / 3))) < 1e-15
    assert abs(pimaex.policy_influence_pmi(p, q, 0) - math.log(2)) < 1e-15
    marginal = pimaex.marginal_policy([0.4, 0.6], [[0.2, 0.8], [0.6, 0.4]])
    assert all(abs(a - b) < 1e-15 for a, b in zip(marginal, [0.4, 0.6]))
    adv, targets = pimaex.gae([1.0, 1.0], [0.0, 0.0], [False, True], 5.0, 0.5, 1.0)
    assert adv == [1.5, 1.0] and targets == adv
    print("influence and gae: ok")


def check_pipeline():
    with tempfile.TemporaryDirectory() as d:
        out = Path(d) / "run"
        cfg = pimaex.preset_config(
            "pimaex-beta",
            overrides=[
                "env.episode_len=40",
                "env.explores_per_level=5",
                "ppo.batch_size=2",
                "ppo.unroll_length=16",
                "rnd.warmup_steps=500",
                "runtime.num_actors=1",
                "runtime.seeds=[0]",
                "runtime.total_env_steps=64",
                "runtime.eval_episodes=2",
                "runtime.mode=sync",
                f"output_dir={json.dumps(str(out))}",
            ],
        )
        summary = json.loads(pimaex.train(cfg))
        assert summary["seeds"][0]["env_steps"] >= 64
        ck = out / "seed_0" / "checkpoints" / "final.json"
        measures = json.loads(pimaex.evaluate(str(ck), 2, str(Path(d) / "eval.csv")))
        assert measures["joint_return"]["count"] == 2
        files = pimaex.make_report([str(out)], str(Path(d) / "report"))
        assert any(str(f).endswith("comparison.csv") for f in files)
        print(f"pipeline: trained, evaluated, {len(files)} report files")


if __name__ == "__main__":
    assert "pimaex-beta" in pimaex.PRESETS
    check_env()
    check_network()
    check_math()
    check_pipeline()
    print("smoke test passed")
