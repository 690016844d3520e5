"""Procedural token tasks with verifiable rewards.

Five kinds: ``copy`` (echo a payload), ``sort`` (emit it ascending),
``modsum_chain`` (emit running prefix sums modulo m), ``mini_countdown``
(combine three operands with + - * to hit a target), and ``mini_sudoku``
(complete a 4x4 grid with a unique solution).

Every instance is a fixed-width prompt plus a gold generation window of
exactly ``gen_len`` tokens: ``<ans> payload </ans>`` followed by EOS padding.
Variable-length payloads therefore surface as EOS-heavy windows, which is
what makes end-of-sequence behavior worth studying on these tasks.

Rewards are total functions of the emitted window: anything unparseable is
simply 0.0. Train/test membership hangs off a stable content hash, so
duplicate draws can never straddle the split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, IntegrityError, InvalidInputError
from .vocab import Vocabulary, build_vocab

TASK_KINDS = ("copy", "sort", "modsum_chain", "mini_countdown", "mini_sudoku")

TEST_FRACTION_PERCENT = 20


@dataclass(frozen=True)
class TaskConfig:
    kind: str
    count: int
    gen_len: int
    value_range: int = 9
    # copy / sort
    payload_min: int = 4
    payload_max: int = 8
    # modsum_chain
    chain_min: int = 3
    chain_max: int = 6
    modulus: int = 8
    # mini_countdown
    operand_max: int = 9
    # mini_sudoku
    blanks_min: int = 4
    blanks_max: int = 8

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind: {self.kind!r}")
        if self.count < 1:
            raise ConfigError("count must be positive")
        if self.kind in ("copy", "sort"):
            if not 1 <= self.payload_min <= self.payload_max:
                raise ConfigError("payload bounds must satisfy 1 <= min <= max")
            if self.payload_max + 2 > self.gen_len:
                raise ConfigError("gen_len too small for the longest payload")
        if self.kind == "modsum_chain":
            if not 1 <= self.chain_min <= self.chain_max:
                raise ConfigError("chain bounds must satisfy 1 <= min <= max")
            if self.modulus < 2 or self.modulus > self.value_range:
                raise ConfigError("modulus must be in [2, value_range]")
            if self.chain_max + 2 > self.gen_len:
                raise ConfigError("gen_len too small for the longest chain")
        if self.kind == "mini_countdown":
            if self.operand_max < 1 or self.operand_max >= self.value_range:
                raise ConfigError("operand_max must be in [1, value_range)")
            if self.gen_len < 7:
                raise ConfigError("mini_countdown needs gen_len >= 7")
        if self.kind == "mini_sudoku":
            if self.value_range < 5:
                raise ConfigError("mini_sudoku needs value tokens v0..v4")
            if not 0 <= self.blanks_min <= self.blanks_max <= 12:
                raise ConfigError("blank bounds must satisfy 0 <= min <= max <= 12")
            if self.gen_len < 18:
                raise ConfigError("mini_sudoku needs gen_len >= 18")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(**d)


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    prompt: tuple[int, ...]
    gold_window: tuple[int, ...]
    meta: dict
    instance_id: str
    split: str


@dataclass
class TaskSuite:
    config: TaskConfig
    vocab: Vocabulary
    prompt_len: int
    seed: int
    instances: list[TaskInstance]

    @property
    def gen_len(self) -> int:
        return self.config.gen_len

    def split(self, name: str) -> list[TaskInstance]:
        return [inst for inst in self.instances if inst.split == name]

    def arrays(self, split: str | None = None):
        """(prompts, windows) int64 arrays for the given split (all when None)."""
        insts = self.instances if split is None else self.split(split)
        if not insts:
            raise InvalidInputError(f"no instances in split {split!r}")
        prompts = np.array([i.prompt for i in insts], dtype=np.int64)
        windows = np.array([i.gold_window for i in insts], dtype=np.int64)
        return prompts, windows


def suite_vocab(kind: str, value_range: int) -> Vocabulary:
    return build_vocab((kind,), value_range, with_ops=kind == "mini_countdown")


def _instance_hash(kind: str, prompt: Iterable[int], gold: Iterable[int]) -> str:
    canon = json.dumps([kind, list(prompt), list(gold)], separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _assign_split(instance_id: str) -> str:
    return "test" if int(instance_id, 16) % 100 < TEST_FRACTION_PERCENT else "train"


def _window(vocab: Vocabulary, payload: list[int], gen_len: int) -> tuple[int, ...]:
    toks = [vocab.ans_open_id, *payload, vocab.ans_close_id]
    if len(toks) > gen_len:
        raise ConfigError("answer payload does not fit the generation window")
    toks.extend([vocab.eos_id] * (gen_len - len(toks)))
    return tuple(toks)


def _pad_prompt(vocab: Vocabulary, body: list[int], width: int) -> tuple[int, ...]:
    return tuple(body + [vocab.pad_id] * (width - len(body)))


def prompt_width(cfg: TaskConfig) -> int:
    if cfg.kind in ("copy", "sort"):
        return 2 + cfg.payload_max
    if cfg.kind == "modsum_chain":
        return 2 + cfg.chain_max
    if cfg.kind == "mini_countdown":
        return 6
    return 17  # mini_sudoku: marker + 16 cells


# ---------------------------------------------------------------------------
# generators


def _gen_copy_like(cfg, vocab, rng, do_sort: bool):
    k = int(rng.integers(cfg.payload_min, cfg.payload_max + 1))
    values = rng.integers(0, cfg.value_range, size=k)
    payload = np.sort(values) if do_sort else values
    body = [vocab.marker_id(cfg.kind), *(vocab.value_id(int(v)) for v in values),
            vocab.sep_id]
    prompt = _pad_prompt(vocab, body, prompt_width(cfg))
    gold = _window(vocab, [vocab.value_id(int(v)) for v in payload], cfg.gen_len)
    return prompt, gold, {"values": [int(v) for v in values]}


def _gen_modsum(cfg, vocab, rng):
    k = int(rng.integers(cfg.chain_min, cfg.chain_max + 1))
    values = rng.integers(0, cfg.modulus, size=k)
    sums = np.cumsum(values) % cfg.modulus
    body = [vocab.marker_id(cfg.kind), *(vocab.value_id(int(v)) for v in values),
            vocab.sep_id]
    prompt = _pad_prompt(vocab, body, prompt_width(cfg))
    gold = _window(vocab, [vocab.value_id(int(s)) for s in sums], cfg.gen_len)
    return prompt, gold, {"values": [int(v) for v in values],
                          "sums": [int(s) for s in sums]}


_COUNTDOWN_OPS = {"op:+": lambda a, b: a + b, "op:-": lambda a, b: a - b,
                  "op:*": lambda a, b: a * b}


def _gen_countdown(cfg, vocab, rng):
    op_names = list(_COUNTDOWN_OPS)
    while True:
        operands = [int(v) for v in rng.integers(1, cfg.operand_max + 1, size=3)]
        ops = [op_names[int(i)] for i in rng.integers(0, 3, size=2)]
        target = _COUNTDOWN_OPS[ops[1]](
            _COUNTDOWN_OPS[ops[0]](operands[0], operands[1]), operands[2])
        if 0 <= target < cfg.value_range:
            break
    shown = sorted(operands)
    body = [vocab.marker_id(cfg.kind), *(vocab.value_id(v) for v in shown),
            vocab.sep_id, vocab.value_id(target)]
    prompt = _pad_prompt(vocab, body, prompt_width(cfg))
    payload = [vocab.value_id(operands[0]), vocab.id_of(ops[0]),
               vocab.value_id(operands[1]), vocab.id_of(ops[1]),
               vocab.value_id(operands[2])]
    gold = _window(vocab, payload, cfg.gen_len)
    return prompt, gold, {"operands": shown, "target": target}


def _sudoku_boxes(r: int, c: int) -> int:
    return (r // 2) * 2 + (c // 2)


def _solved_grid(rng) -> np.ndarray:
    """Random complete 4x4 grid via backtracking with shuffled digit order."""
    grid = np.zeros((4, 4), dtype=np.int64)

    def fill(cell: int) -> bool:
        if cell == 16:
            return True
        r, c = divmod(cell, 4)
        for d in rng.permutation([1, 2, 3, 4]):
            if d in grid[r] or d in grid[:, c]:
                continue
            br, bc = (r // 2) * 2, (c // 2) * 2
            if d in grid[br : br + 2, bc : bc + 2]:
                continue
            grid[r, c] = d
            if fill(cell + 1):
                return True
            grid[r, c] = 0
        return False

    assert fill(0)
    return grid


def count_solutions(grid: np.ndarray, limit: int = 2) -> int:
    """Backtracking solution counter for a partial 4x4 grid (0 = blank)."""
    work = grid.copy()
    blanks = [(r, c) for r in range(4) for c in range(4) if work[r, c] == 0]
    found = 0

    def step(i: int) -> None:
        nonlocal found
        if found >= limit:
            return
        if i == len(blanks):
            found += 1
            return
        r, c = blanks[i]
        for d in (1, 2, 3, 4):
            if d in work[r] or d in work[:, c]:
                continue
            br, bc = (r // 2) * 2, (c // 2) * 2
            if d in work[br : br + 2, bc : bc + 2]:
                continue
            work[r, c] = d
            step(i + 1)
            work[r, c] = 0

    step(0)
    return found


def _gen_sudoku(cfg, vocab, rng):
    solution = _solved_grid(rng)
    target_blanks = int(rng.integers(cfg.blanks_min, cfg.blanks_max + 1))
    puzzle = solution.copy()
    blanks = 0
    for cell in rng.permutation(16):
        if blanks == target_blanks:
            break
        r, c = divmod(int(cell), 4)
        held = puzzle[r, c]
        puzzle[r, c] = 0
        if count_solutions(puzzle) == 1:
            blanks += 1
        else:
            puzzle[r, c] = held
    flat_puzzle = [int(v) for v in puzzle.reshape(-1)]
    flat_solution = [int(v) for v in solution.reshape(-1)]
    body = [vocab.marker_id(cfg.kind), *(vocab.value_id(v) for v in flat_puzzle)]
    prompt = _pad_prompt(vocab, body, prompt_width(cfg))
    gold = _window(vocab, [vocab.value_id(v) for v in flat_solution], cfg.gen_len)
    return prompt, gold, {"puzzle": flat_puzzle, "solution": flat_solution,
                          "blanks": blanks}


def generate_suite(cfg: TaskConfig, seed: int) -> TaskSuite:
    """Draw ``cfg.count`` i.i.d. instances; fully determined by (cfg, seed)."""
    vocab = suite_vocab(cfg.kind, cfg.value_range)
    rng = np.random.default_rng(seed)
    instances = []
    for _ in range(cfg.count):
        if cfg.kind in ("copy", "sort"):
            prompt, gold, meta = _gen_copy_like(cfg, vocab, rng, cfg.kind == "sort")
        elif cfg.kind == "modsum_chain":
            prompt, gold, meta = _gen_modsum(cfg, vocab, rng)
        elif cfg.kind == "mini_countdown":
            prompt, gold, meta = _gen_countdown(cfg, vocab, rng)
        else:
            prompt, gold, meta = _gen_sudoku(cfg, vocab, rng)
        iid = _instance_hash(cfg.kind, prompt, gold)
        instances.append(TaskInstance(
            kind=cfg.kind, prompt=prompt, gold_window=gold, meta=meta,
            instance_id=iid, split=_assign_split(iid),
        ))
    return TaskSuite(config=cfg, vocab=vocab, prompt_len=prompt_width(cfg),
                     seed=seed, instances=instances)


# ---------------------------------------------------------------------------
# verification


def parse_answer(window: np.ndarray, vocab: Vocabulary) -> list[int] | None:
    """Token payload between the first <ans> and the first following </ans>,
    or None when no such span exists. Content after the span is ignored."""
    window = np.asarray(window)
    opens = np.flatnonzero(window == vocab.ans_open_id)
    if opens.size == 0:
        return None
    start = int(opens[0])
    closes = np.flatnonzero(window[start + 1 :] == vocab.ans_close_id)
    if closes.size == 0:
        return None
    end = start + 1 + int(closes[0])
    return [int(t) for t in window[start + 1 : end]]


def _payload_values(payload: list[int], vocab: Vocabulary) -> list[int] | None:
    out = []
    for tok in payload:
        v = vocab.value_of(tok)
        if v is None:
            return None
        out.append(v)
    return out


def reward(instance: TaskInstance, window: np.ndarray, vocab: Vocabulary) -> float:
    """Score an emitted window against the instance. Total: never raises on
    arbitrary token content; unparseable output scores 0."""
    payload = parse_answer(window, vocab)
    if payload is None:
        return 0.0
    kind = instance.kind
    if kind in ("copy", "sort", "modsum_chain"):
        values = _payload_values(payload, vocab)
        if values is None:
            return 0.0
        if kind == "copy":
            expected = instance.meta["values"]
        elif kind == "sort":
            expected = sorted(instance.meta["values"])
        else:
            expected = instance.meta["sums"]
        return 1.0 if values == expected else 0.0
    if kind == "mini_countdown":
        if len(payload) != 5:
            return 0.0
        vals = [vocab.value_of(payload[i]) for i in (0, 2, 4)]
        ops = [vocab.tokens[payload[i]] for i in (1, 3)]
        if any(v is None for v in vals) or any(op not in _COUNTDOWN_OPS for op in ops):
            return 0.0
        if sorted(vals) != instance.meta["operands"]:
            return 0.0
        result = _COUNTDOWN_OPS[ops[1]](_COUNTDOWN_OPS[ops[0]](vals[0], vals[1]), vals[2])
        return 1.0 if result == instance.meta["target"] else 0.0
    # mini_sudoku: cell accuracy against the unique solution
    values = _payload_values(payload, vocab)
    if values is None or len(values) != 16:
        return 0.0
    solution = instance.meta["solution"]
    return sum(1 for a, b in zip(values, solution) if a == b) / 16.0


def exact_match(instance: TaskInstance, window: np.ndarray) -> bool:
    return np.array_equal(np.asarray(window), np.asarray(instance.gold_window))


# ---------------------------------------------------------------------------
# suite files (JSONL: header record then one record per instance)


SUITE_SCHEMA = "mdlab.tasks.v1"


def save_suite(suite: TaskSuite, path) -> None:
    with open(path, "w") as fh:
        header = {
            "schema": SUITE_SCHEMA,
            "config": suite.config.to_dict(),
            "vocab": suite.vocab.to_spec(),
            "prompt_len": suite.prompt_len,
            "seed": suite.seed,
            "count": len(suite.instances),
        }
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for inst in suite.instances:
            fh.write(json.dumps({
                "id": inst.instance_id,
                "split": inst.split,
                "prompt": list(inst.prompt),
                "gold_window": list(inst.gold_window),
                "meta": inst.meta,
            }, separators=(",", ":")) + "\n")


def load_suite(path) -> TaskSuite:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise IntegrityError(f"empty task suite file: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"task suite header is not JSON: {exc}") from exc
    if header.get("schema") != SUITE_SCHEMA:
        raise IntegrityError(f"unexpected task suite schema: {header.get('schema')!r}")
    cfg = TaskConfig.from_dict(header["config"])
    vocab = Vocabulary.from_spec(header["vocab"])
    instances = []
    for line in lines[1:]:
        rec = json.loads(line)
        instances.append(TaskInstance(
            kind=cfg.kind,
            prompt=tuple(rec["prompt"]),
            gold_window=tuple(rec["gold_window"]),
            meta=rec["meta"],
            instance_id=rec["id"],
            split=rec["split"],
        ))
    if len(instances) != header["count"]:
        raise IntegrityError(
            f"task suite truncated: header says {header['count']}, found {len(instances)}"
        )
    return TaskSuite(config=cfg, vocab=vocab, prompt_len=header["prompt_len"],
                     seed=header["seed"], instances=instances)
