"""Character tokenizer and the real/fake prompt bank."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789 .,'-&:;!?/()\"_+*=#%@<>$"
VOCAB_SIZE = 4 + len(_CHARS)
assert VOCAB_SIZE == 64


class CharTokenizer:
    """Lower-cases, maps unknown characters to UNK, wraps in BOS/EOS.

    Text longer than ``max_len - 2`` characters is truncated so that EOS always
    fits.
    """

    def __init__(self, max_len: int = 32):
        if max_len < 2:
            raise ConfigError("max_len must leave room for BOS and EOS")
        self.max_len = max_len
        self._ids = {c: i + 4 for i, c in enumerate(_CHARS)}

    @property
    def vocab_size(self) -> int:
        return VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        body = [self._ids.get(c, UNK) for c in text.lower()][: self.max_len - 2]
        return [BOS, *body, EOS]

    def batch(self, prompts) -> tuple[np.ndarray, np.ndarray]:
        """Padded id matrix ``[M, max_len]`` and the EOS position per row."""
        ids = np.full((len(prompts), self.max_len), PAD, dtype=np.int64)
        eos = np.zeros(len(prompts), dtype=np.int64)
        for row, text in enumerate(prompts):
            toks = self.encode(text)
            ids[row, : len(toks)] = toks
            eos[row] = len(toks) - 1
        return ids, eos


FAMILIES = ("physical", "digital")


@dataclass
class PromptBank:
    """Class prompts; ``fake_by_family`` holds family-specific fake prompts."""

    real: list[str]
    fake: list[str]
    fake_by_family: dict[str, list[str]] = field(default_factory=dict)

    def fake_all(self) -> list[str]:
        out = list(self.fake)
        for fam in FAMILIES:
            out.extend(p for p in self.fake_by_family.get(fam, []) if p not in out)
        return out

    def validate(self) -> None:
        if not self.real:
            raise ConfigError("prompt bank has no real-class prompt")
        if not self.fake_all():
            raise ConfigError("prompt bank has no fake-class prompt")

    @classmethod
    def default(cls) -> "PromptBank":
        return cls(
            real=["a photo of a real face"],
            fake=["a photo of a fake face", "a printed photo attack of a face", "a digitally manipulated face"],
        )

    @classmethod
    def parse(cls, text: str) -> "PromptBank":
        """Parse ``real: ...`` / ``fake: ...`` / ``fake/<family>: ...`` lines."""
        bank = cls(real=[], fake=[], fake_by_family={})
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, sep, prompt = line.partition(":")
            prompt = prompt.strip()
            if not sep or not prompt:
                raise ConfigError(f"prompt bank line {lineno}: expected '<class>: <prompt>'")
            tag = tag.strip().lower()
            if tag == "real":
                bank.real.append(prompt)
            elif tag == "fake":
                bank.fake.append(prompt)
            elif tag.startswith("fake/") and tag[5:] in FAMILIES:
                bank.fake_by_family.setdefault(tag[5:], []).append(prompt)
            else:
                raise ConfigError(f"prompt bank line {lineno}: unknown class tag {tag!r}")
        bank.validate()
        return bank

    @classmethod
    def load(cls, path) -> "PromptBank":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = [f"real: {p}" for p in self.real] + [f"fake: {p}" for p in self.fake]
        for fam in FAMILIES:
            lines += [f"fake/{fam}: {p}" for p in self.fake_by_family.get(fam, [])]
        return "\n".join(lines) + "\n"
