import shutil
from pathlib import Path

from recam.cli import main
from recam.config import RunConfig

FIXTURES = Path(__file__).parent / "fixtures"
DESK_FLAGS = ["--lr", "0.002", "--batch-size", "2", "--epochs", "2", "--unsafe", "--seed", "7"]


def desk_config(**kw) -> RunConfig:
    """Small-data settings that fall outside the published grid."""
    base = dict(learning_rate=2e-3, batch_size=2, epochs=2, warmup=0.1, unsafe=True, seed=7)
    base.update(kw)
    return RunConfig(**base)


def run_pipeline(root, monkeypatch):
    """prepare -> rank -> augment -> train -> evaluate, all with relative paths under ``root``."""
    shutil.copytree(FIXTURES / "data1", root / "data")
    monkeypatch.chdir(root)
    assert main(["prepare", "--data-dir", "data", "--out", "run"]) == 0
    assert main(["rank", "--in", "data/train.jsonl", "--out", "run/train.ranked.jsonl"]) == 0
    assert main(["augment", "--in", "data/train.jsonl", "--out", "run/train.bt.jsonl",
                 "--translator", "identity", "--cache-dir", "run/cache"]) == 0
    assert main(["train", "--data-dir", "data", "--out", "run/ckpt", *DESK_FLAGS,
                 "--techniques", "special_tokens", "siamese"]) == 0
    assert main(["evaluate", "--ckpt", "run/ckpt", "--data-dir", "data", "--split", "dev", "--out", "run/eval"]) == 0
    assert main(["predict", "--ckpt", "run/ckpt", "--in", "data/test.jsonl", "--out", "run/pred.jsonl"]) == 0


def file_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
