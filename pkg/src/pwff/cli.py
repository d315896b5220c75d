"""Experiment orchestrator and ``pwff-sim`` command line interface.

Subcommands run the three federated phases (``instruct``, ``reward``,
``align``), chain them (``full``), or render plot-ready per-round series
from existing CSVs (``report``). Configuration is a flat ``key = value``
text file (``#`` comments allowed); the documented keys are in
``CONFIG_SCHEMA`` and unknown keys are rejected with the offending line
number. ``--seed``, ``--strategies`` and ``--out`` override config keys.

Artifacts written into the output directory:
  config.resolved        resolved key=value snapshot (flag overrides applied)
  <phase>_rounds.csv     per-phase round reports (fixed column schema)
  rounds.csv             all phases concatenated, with a leading phase column
  comparison.csv         per-strategy summary (accuracy, bits, delay, energy, rewards)
  checkpoints/           per-phase, per-strategy, per-client parameter files
  ERROR                  written when a phase fails (partial artifacts remain)

Everything downstream of (config, seed) is deterministic: two runs produce
byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import traceback

import numpy as np

from . import channel as ch
from . import fed as F
from . import model as M
from . import rlhf as R
from . import tasks as T
from .errors import ConfigError, PhaseOrderError

PHASES = ("instruct", "reward", "align")

# key -> (type, default); None default means the key is required
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, None),
    "n_clients": (int, 10),
    "strategies": (str, "PWFF"),
    "aggregation": (str, "data_size"),
    "metering": (str, "uplink"),
    "pref_weights": (str, "random"),

    "model.vocab_size": (int, 24),
    "model.d_model": (int, 64),
    "model.n_layers": (int, 2),
    "model.n_heads": (int, 4),
    "model.max_seq_len": (int, 16),
    "model.adapter_bottleneck": (int, 10),
    "model.lora_alpha": (float, 8.0),
    "model.lora_rank_pool": (str, "2,4,8"),
    "model.lora_rank_uniform": (int, 4),
    "model.d_ff": (int, 0),
    "model.emb_std": (float, 0.3),

    "scorer.d_model": (int, 32),
    "scorer.n_layers": (int, 1),
    "scorer.n_heads": (int, 2),
    "scorer.d_ff": (int, 128),

    "tasks.n_train": (int, 500),
    "tasks.n_eval": (int, 120),
    "tasks.alpha": (float, 0.5),
    "tasks.mix": (str, "copy:0.5,reverse:0.3,sort:0.2"),
    "tasks.payload_min": (int, 3),
    "tasks.payload_max": (int, 3),
    "tasks.n_forbidden": (int, 7),

    "channel.snr_db": (float, 5.0),
    "channel.bandwidth_hz": (float, 1e6),
    "channel.tx_power_w": (float, 1.0),
    "channel.fading": (str, "none"),

    "instruct.rounds": (int, 40),
    "instruct.patience": (int, 15),
    "instruct.min_rel_improve": (float, 0.01),
    "instruct.lr": (float, 0.5),
    "instruct.epochs": (int, 2),
    "instruct.batch_size": (int, 16),
    "instruct.lora_lr_scale": (float, 0.25),

    "reward.rounds": (int, 16),
    "reward.patience": (int, 0),
    "reward.min_rel_improve": (float, 0.0),
    "reward.lr": (float, 2e-3),
    "reward.weight_decay": (float, 0.01),
    "reward.steps_per_round": (int, 20),
    "reward.batch_size": (int, 16),
    "reward.n_pairs": (int, 250),
    "reward.n_heldout": (int, 10),
    "reward.min_gap_helpful": (float, 0.5),
    "reward.min_gap_harmless": (float, 0.15),
    "reward.temperature": (float, 1.3),

    "align.rounds": (int, 10),
    "align.patience": (int, 0),
    "align.min_rel_improve": (float, 0.0),
    "ppo.clip_eps": (float, 0.2),
    "ppo.gamma": (float, 1.0),
    "ppo.gae_lambda": (float, 0.95),
    "ppo.kl_coeff": (float, 0.02),
    "ppo.rollout_batch": (int, 16),
    "ppo.ppo_epochs": (int, 4),
    "ppo.lr_policy": (float, 2e-3),
    "ppo.lr_critic": (float, 2e-3),
    "ppo.rollout_temperature": (float, 1.0),
    "ppo.max_new": (int, 5),
    "ppo.normalize_advantages": (bool, True),
}


def _parse_value(key: str, raw: str, line_no: int):
    typ, _ = CONFIG_SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {line_no}: key {key!r} expects {typ.__name__}, got {raw!r}") from None


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from None
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {i}: expected 'key = value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {i}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {i}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw, i)
    return values


def resolve_config(path: str | None, overrides: dict | None = None) -> dict:
    """File values + flag overrides + defaults; missing required keys fail."""
    values = parse_config_file(path) if path else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    for key, (_, default) in CONFIG_SCHEMA.items():
        if key not in values:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            values[key] = default
    _validate(values)
    return values


def _validate(cfg: dict) -> None:
    strategies = parse_strategies(cfg["strategies"])
    if not strategies:
        raise ConfigError("strategies list is empty")
    if cfg["aggregation"] not in ("data_size", "uniform"):
        raise ConfigError(f"unknown aggregation scheme {cfg['aggregation']!r}")
    if cfg["metering"] not in ("uplink", "updown"):
        raise ConfigError(f"metering must be uplink or updown, got {cfg['metering']!r}")
    if cfg["n_clients"] < 2:
        raise ConfigError("n_clients must be >= 2")
    parse_mix(cfg["tasks.mix"])
    parse_rank_pool(cfg["model.lora_rank_pool"])
    if cfg["pref_weights"] != "random":
        ws = parse_weight_list(cfg["pref_weights"])
        if len(ws) != cfg["n_clients"]:
            raise ConfigError(f"pref_weights lists {len(ws)} clients, expected {cfg['n_clients']}")


def parse_strategies(raw: str) -> list[F.Strategy]:
    out = []
    for name in [s.strip() for s in raw.split(",") if s.strip()]:
        if name not in F.STRATEGIES:
            raise ConfigError(f"unknown strategy {name!r} (known: {', '.join(F.STRATEGIES)})")
        out.append(F.STRATEGIES[name])
    return out


def parse_mix(raw: str) -> dict[str, float]:
    mix = {}
    for part in raw.split(","):
        if ":" not in part:
            raise ConfigError(f"bad tasks.mix entry {part!r} (want kind:prob)")
        kind, prob = part.split(":", 1)
        try:
            mix[kind.strip()] = float(prob)
        except ValueError:
            raise ConfigError(f"bad tasks.mix probability {prob!r}") from None
    return mix


def parse_rank_pool(raw: str) -> tuple[int, ...]:
    try:
        pool = tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad model.lora_rank_pool {raw!r}") from None
    if not pool:
        raise ConfigError("model.lora_rank_pool is empty")
    return pool


def parse_weight_list(raw: str) -> list[tuple[float, float]]:
    try:
        ws = [float(x) for x in raw.split(";") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad pref_weights {raw!r} (want 'random' or semicolon floats)") from None
    for w in ws:
        if not 0.0 <= w <= 1.0:
            raise ConfigError(f"pref_weights entries must be in [0, 1], got {w}")
    return [(w, 1.0 - w) for w in ws]


def write_resolved(cfg: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key in sorted(cfg):
            f.write(f"{key} = {cfg[key]}\n")


# ---------------------------------------------------------------------------
# world construction (shared deterministic derivations)
# ---------------------------------------------------------------------------


class Experiment:
    """All phase logic for one resolved config, rooted at an output dir."""

    def __init__(self, cfg: dict, out_dir: str):
        self.cfg = cfg
        self.out = out_dir
        self.seed = cfg["seed"]
        self.policy = T.default_policy(cfg["model.vocab_size"], cfg["tasks.n_forbidden"])
        self.mix = parse_mix(cfg["tasks.mix"])
        self.strategies = parse_strategies(cfg["strategies"])
        self.max_new = cfg["tasks.payload_max"] + 2
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

        plen = (cfg["tasks.payload_min"], cfg["tasks.payload_max"])
        self.train = T.gen_dataset(F.derive_seed(self.seed, "train"), cfg["tasks.n_train"],
                                   self.mix, self.policy, plen)
        self.evalset = T.gen_dataset(F.derive_seed(self.seed, "eval"), cfg["tasks.n_eval"],
                                     self.mix, self.policy, plen)
        props = T.dirichlet_proportions(cfg["n_clients"], cfg["tasks.alpha"],
                                        F.derive_seed(self.seed, "partition"))
        self.shards = T.partition_by_proportions(self.train, props,
                                                 F.derive_seed(self.seed, "partition"))
        self.eval_shards = T.partition_by_proportions(self.evalset, props,
                                                      F.derive_seed(self.seed, "eval-partition"))
        self.model_cfg = M.ModelConfig(
            vocab_size=cfg["model.vocab_size"], d_model=cfg["model.d_model"],
            n_layers=cfg["model.n_layers"], n_heads=cfg["model.n_heads"],
            max_seq_len=cfg["model.max_seq_len"],
            adapter_bottleneck=cfg["model.adapter_bottleneck"],
            lora_alpha=cfg["model.lora_alpha"], d_ff=cfg["model.d_ff"],
            emb_std=cfg["model.emb_std"])
        self.scorer_cfg = M.ScorerConfig(
            vocab_size=cfg["model.vocab_size"], d_model=cfg["scorer.d_model"],
            n_layers=cfg["scorer.n_layers"], n_heads=cfg["scorer.n_heads"],
            max_seq_len=cfg["model.max_seq_len"], d_ff=cfg["scorer.d_ff"])
        self.server = F.Server(
            ch.ChannelConfig(cfg["channel.snr_db"], cfg["channel.bandwidth_hz"],
                             cfg["channel.tx_power_w"], cfg["channel.fading"]),
            scheme=cfg["aggregation"],
            fading_seed=F.derive_seed(self.seed, "fading"),
            include_downlink=(cfg["metering"] == "updown"))

    # -- deterministic per-strategy world -----------------------------------

    def client_weights(self) -> list[tuple[float, float]]:
        if self.cfg["pref_weights"] == "random":
            rng = np.random.default_rng(F.derive_seed(self.seed, "pref-weights"))
            return [(w, 1.0 - w) for w in (float(rng.uniform()) for _ in range(self.cfg["n_clients"]))]
        return parse_weight_list(self.cfg["pref_weights"])

    def build_clients(self, strategy: F.Strategy) -> list[F.ClientState]:
        ranks = F.assign_lora_ranks(strategy, self.cfg["n_clients"],
                                    parse_rank_pool(self.cfg["model.lora_rank_pool"]),
                                    self.cfg["model.lora_rank_uniform"],
                                    F.derive_seed(self.seed, "ranks"))
        return F.build_clients(strategy, self.model_cfg, self.shards, self.client_weights(),
                               ranks, F.derive_seed(self.seed, "base-model"),
                               F.derive_seed(self.seed, "peft"))

    # -- checkpoint paths ----------------------------------------------------

    def ckpt_dir(self, phase: str, strategy: F.Strategy) -> str:
        return os.path.join(self.out, "checkpoints", phase, strategy.name)

    def policy_ckpt(self, phase: str, strategy: F.Strategy, cid: int) -> str:
        return os.path.join(self.ckpt_dir(phase, strategy), f"client{cid}.bin")

    def rm_ckpt(self, strategy: F.Strategy, cid: int, objective: str) -> str:
        return os.path.join(self.ckpt_dir("reward", strategy), f"client{cid}_rm_{objective}.bin")

    def save_policies(self, phase: str, strategy: F.Strategy, clients: list[F.ClientState]) -> None:
        os.makedirs(self.ckpt_dir(phase, strategy), exist_ok=True)
        for c in clients:
            M.save_checkpoint(c.model.partition, self.policy_ckpt(phase, strategy, c.id),
                              meta={"phase": phase, "strategy": strategy.name, "client": c.id})

    def load_policies(self, phase: str, strategy: F.Strategy, clients: list[F.ClientState]) -> None:
        for c in clients:
            path = self.policy_ckpt(phase, strategy, c.id)
            if not os.path.exists(path):
                raise PhaseOrderError(
                    f"missing checkpoint {path}; run the {phase!r} phase for "
                    f"strategy {strategy.name} first")
            M.load_into_partition(c.model.partition, path)

    # -- phases ---------------------------------------------------------------

    def run_instruct(self) -> dict[str, list[F.RoundReport]]:
        cfg = self.cfg
        out = {}
        for strategy in self.strategies:
            clients = self.build_clients(strategy)
            stop = F.ConvergenceCriterion(cfg["instruct.rounds"], cfg["instruct.patience"],
                                          cfg["instruct.min_rel_improve"])
            reports = F.run_instruct_phase(
                clients, self.server, strategy, stop, lr=cfg["instruct.lr"],
                epochs=cfg["instruct.epochs"], batch_size=cfg["instruct.batch_size"],
                eval_shards=self.eval_shards, policy=self.policy, seed=self.seed,
                max_new=self.max_new, lora_lr_scale=cfg["instruct.lora_lr_scale"])
            self.save_policies("instruct", strategy, clients)
            out[strategy.name] = reports
        self._write_phase_csv("instruct", out)
        return out

    def _restore_instructed(self, strategy: F.Strategy) -> list[F.ClientState]:
        clients = self.build_clients(strategy)
        self.load_policies("instruct", strategy, clients)
        return clients

    def _gen_preferences(self, clients: list[F.ClientState], strategy: F.Strategy):
        cfg = self.cfg
        objectives = R.OBJECTIVES if strategy.reward_mode == "dual" else ("helpful",)
        gaps = {"helpful": cfg["reward.min_gap_helpful"],
                "harmless": cfg["reward.min_gap_harmless"]}
        for c in clients:
            R.generate_client_preferences(
                c, cfg["reward.n_pairs"], objectives, self.policy, self.seed,
                temperature=cfg["reward.temperature"], max_new=self.max_new,
                min_gap=gaps)
        sampler = M.Sampler("temperature", temperature=cfg["reward.temperature"])
        heldout = {obj: [] for obj in objectives}
        for c in clients:
            for obj in objectives:
                heldout[obj].extend(T.gen_preferences(
                    c.model, self.evalset, cfg["reward.n_heldout"], obj, sampler,
                    F.derive_seed(self.seed, "heldout", obj, c.id), self.policy,
                    max_new=self.max_new, min_gap=gaps[obj]))
        return heldout

    def run_reward(self) -> dict[str, list[F.RoundReport]]:
        cfg = self.cfg
        out = {}
        for strategy in self.strategies:
            clients = self._restore_instructed(strategy)
            heldout = self._gen_preferences(clients, strategy)
            R.setup_reward_models(clients, self.scorer_cfg, self.seed)
            stop = F.ConvergenceCriterion(cfg["reward.rounds"], cfg["reward.patience"],
                                          cfg["reward.min_rel_improve"])
            reports = R.run_reward_phase(
                clients, self.server, strategy, stop, lr=cfg["reward.lr"],
                steps_per_round=cfg["reward.steps_per_round"],
                batch_size=cfg["reward.batch_size"], heldout=heldout, seed=self.seed,
                weight_decay=cfg["reward.weight_decay"])
            os.makedirs(self.ckpt_dir("reward", strategy), exist_ok=True)
            for c in clients:
                for obj, rm in c.reward_models.items():
                    M.save_checkpoint(rm.partition, self.rm_ckpt(strategy, c.id, obj),
                                      meta={"phase": "reward", "objective": obj, "client": c.id})
            out[strategy.name] = reports
        self._write_phase_csv("reward", out)
        return out

    def run_align(self) -> dict[str, list[F.RoundReport]]:
        cfg = self.cfg
        ppo = R.PPOConfig(
            clip_eps=cfg["ppo.clip_eps"], gamma=cfg["ppo.gamma"],
            gae_lambda=cfg["ppo.gae_lambda"], kl_coeff=cfg["ppo.kl_coeff"],
            rollout_batch=cfg["ppo.rollout_batch"], ppo_epochs=cfg["ppo.ppo_epochs"],
            lr_policy=cfg["ppo.lr_policy"], lr_critic=cfg["ppo.lr_critic"],
            rollout_temperature=cfg["ppo.rollout_temperature"], max_new=cfg["ppo.max_new"],
            normalize_advantages=cfg["ppo.normalize_advantages"])
        out = {}
        for strategy in self.strategies:
            clients = self._restore_instructed(strategy)
            for c in clients:
                c.reward_models = {}
                for obj in R.OBJECTIVES:
                    rm = M.ScoringModel(self.scorer_cfg,
                                        seed=F.derive_seed(self.seed, "rm", obj),
                                        group="reward_head")
                    path = self.rm_ckpt(strategy, c.id, obj)
                    if strategy.reward_mode == "dual" or obj == "helpful":
                        if not os.path.exists(path):
                            raise PhaseOrderError(
                                f"missing checkpoint {path}; run the 'reward' phase for "
                                f"strategy {strategy.name} first")
                        M.load_into_partition(rm.partition, path)
                    c.reward_models[obj] = rm
            stop = F.ConvergenceCriterion(cfg["align.rounds"], cfg["align.patience"],
                                          cfg["align.min_rel_improve"])
            reports = R.run_align_phase(clients, self.server, strategy, stop, ppo_cfg=ppo,
                                        eval_shards=self.eval_shards, policy=self.policy,
                                        seed=self.seed)
            self.save_policies("align", strategy, clients)
            out[strategy.name] = reports
        self._write_phase_csv("align", out)
        return out

    # -- artifacts -------------------------------------------------------------

    def _phase_csv(self, phase: str) -> str:
        return os.path.join(self.out, f"{phase}_rounds.csv")

    def _write_phase_csv(self, phase: str, by_strategy: dict[str, list[F.RoundReport]]) -> None:
        reports = [rep for name in sorted(by_strategy) for rep in by_strategy[name]]
        F.write_rounds_csv(reports, self._phase_csv(phase))
        self._write_combined()
        self._write_comparison()

    def _write_combined(self) -> None:
        out_path = os.path.join(self.out, "rounds.csv")
        with open(out_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("phase," + F.CSV_HEADER + "\n")
            for phase in PHASES:
                path = self._phase_csv(phase)
                if not os.path.exists(path):
                    continue
                with open(path, encoding="utf-8") as src:
                    next(src)
                    for line in src:
                        f.write(f"{phase},{line}")

    def _read_phase_globals(self, phase: str) -> dict[str, list[dict]]:
        """GLOBAL rows of a phase CSV, keyed by strategy, in round order."""
        path = self._phase_csv(phase)
        if not os.path.exists(path):
            return {}
        out: dict[str, list[dict]] = {}
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip().split(",")
            for line in f:
                row = dict(zip(header, line.rstrip("\n").split(",")))
                if row["client_id"] == "GLOBAL":
                    out.setdefault(row["strategy"], []).append(row)
        return out

    def _write_comparison(self) -> None:
        instruct = self._read_phase_globals("instruct")
        align = self._read_phase_globals("align")
        path = os.path.join(self.out, "comparison.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("strategy,accuracy,bits,delay_s,energy_J,r_helpful,r_harmless,r_total\n")
            for strategy in self.strategies:
                name = strategy.name
                acc = instruct[name][-1]["accuracy"] if name in instruct else ""
                src = align.get(name) or instruct.get(name)
                bits = src[-1]["bits"] if src else ""
                delay = src[-1]["delay_s"] if src else ""
                energy = src[-1]["energy_J"] if src else ""
                r_h = align[name][-1]["r_helpful"] if name in align else ""
                r_x = align[name][-1]["r_harmless"] if name in align else ""
                r_t = align[name][-1]["r_total"] if name in align else ""
                f.write(f"{name},{acc},{bits},{delay},{energy},{r_h},{r_x},{r_t}\n")

    def report(self) -> None:
        """Per-round wide tables (one column per strategy) for plotting."""
        present = [p for p in PHASES if os.path.exists(self._phase_csv(p))]
        if not present:
            expected = ", ".join(f"{p}_rounds.csv" for p in PHASES)
            raise ConfigError(f"no round CSVs in {self.out}; expected at least one of: {expected}")
        metrics = {"accuracy": "accuracy", "delay": "delay_s", "energy": "energy_J",
                   "r_total": "r_total"}
        for phase in present:
            globals_by_strategy = self._read_phase_globals(phase)
            strategies = sorted(globals_by_strategy)
            n_rounds = max(len(v) for v in globals_by_strategy.values())
            for metric, column in metrics.items():
                path = os.path.join(self.out, f"report_{phase}_{metric}.csv")
                with open(path, "w", encoding="utf-8", newline="\n") as f:
                    f.write("round," + ",".join(strategies) + "\n")
                    for r in range(n_rounds):
                        cells = [str(r)]
                        for s in strategies:
                            rows = globals_by_strategy[s]
                            cells.append(rows[r][column] if r < len(rows) else "")
                        f.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pwff-sim",
        description="Personalized wireless federated fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("instruct", "federated instruction tuning"),
            ("reward", "federated reward learning (requires instruct checkpoints)"),
            ("align", "federated PPO alignment (requires instruct+reward checkpoints)"),
            ("full", "all three phases in sequence"),
            ("report", "render plot-ready series from existing CSVs")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--strategies", default=None, help="comma-separated strategy list")
        p.add_argument("--out", default="artifacts", help="output directory")
    return parser


def run(command: str, config_path: str | None, out_dir: str,
        seed: int | None = None, strategies: str | None = None) -> int:
    """Run one subcommand; returns a process exit status.

    Exit codes: 0 success, 2 invalid configuration, 1 phase failure (an
    ERROR marker file with the traceback is left in the output directory).
    """
    try:
        cfg = resolve_config(config_path,
                             {"seed": seed, "strategies": strategies})
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    exp = Experiment(cfg, out_dir)
    write_resolved(cfg, os.path.join(out_dir, "config.resolved"))
    try:
        if command == "report":
            exp.report()
        elif command == "instruct":
            exp.run_instruct()
        elif command == "reward":
            exp.run_reward()
        elif command == "align":
            exp.run_align()
        elif command == "full":
            exp.run_instruct()
            exp.run_reward()
            exp.run_align()
        else:
            raise ConfigError(f"unknown command {command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        marker = os.path.join(out_dir, "ERROR")
        with open(marker, "w", encoding="utf-8") as f:
            f.write(f"{type(e).__name__}: {e}\n\n")
            f.write(traceback.format_exc())
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return run(args.command, args.config, args.out, args.seed, args.strategies)


if __name__ == "__main__":
    sys.exit(main())
