"""Training configuration, recorded verbatim in the export for provenance."""

from dataclasses import dataclass, field, asdict


@dataclass(frozen=True)
class TrainingConfig:
    dataset: str = "mnist"
    arch: str = "tiny3"          # registry key in net.py
    epochs: int = 15
    seed: int = 0
    batch_size: int = 128
    learning_rate: float = 1e-3
    test_count: int = 2000
    train_limit: int = 0         # 0 = use the full training split

    def __post_init__(self):
        if self.dataset != "mnist":
            raise ValueError(f"unsupported dataset {self.dataset!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.test_count < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, test_count >= 1")

    def to_dict(self) -> dict:
        return asdict(self)
