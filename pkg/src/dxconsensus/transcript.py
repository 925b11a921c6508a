"""Psychiatrist-patient conversation turns."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Iterable, Sequence


class Speaker(str, enum.Enum):
    PSYCHIATRIST = "psychiatrist"
    PATIENT = "patient"

    @property
    def tag(self) -> str:
        return self.value.capitalize()


class InvalidTranscript(ValueError):
    pass


@dataclass(frozen=True)
class ConversationTurn:
    speaker: Speaker
    text: str

    def __post_init__(self) -> None:
        if not isinstance(self.speaker, Speaker):
            try:
                object.__setattr__(self, "speaker", Speaker(str(self.speaker).lower()))
            except ValueError:
                raise InvalidTranscript(f"unknown speaker {self.speaker!r}") from None
        if not isinstance(self.text, str) or not self.text.strip():
            raise InvalidTranscript("turn text is empty")

    def render(self) -> str:
        return f"{self.speaker.tag}: {self.text}"

    def to_dict(self) -> dict[str, str]:
        return {"speaker": self.speaker.value, "text": self.text}

    @classmethod
    def from_dict(cls, obj: Any) -> "ConversationTurn":
        if not isinstance(obj, dict) or "speaker" not in obj or "text" not in obj:
            raise InvalidTranscript("turn must be an object with speaker and text")
        return cls(obj["speaker"], obj["text"])


Transcript = Sequence[ConversationTurn]


def parse_turns(items: Iterable[Any]) -> list[ConversationTurn]:
    return [t if isinstance(t, ConversationTurn) else ConversationTurn.from_dict(t) for t in items]


def check_transcript(turns: Transcript, max_turns: int | None = None) -> None:
    """Raise InvalidTranscript unless both parties speak at least once."""
    if not turns:
        raise InvalidTranscript("transcript has no turns")
    speakers = {t.speaker for t in turns}
    if Speaker.PATIENT not in speakers:
        raise InvalidTranscript("transcript has no patient turn")
    if Speaker.PSYCHIATRIST not in speakers:
        raise InvalidTranscript("transcript has no psychiatrist turn")
    if max_turns is not None and len(turns) > max_turns:
        raise InvalidTranscript(f"transcript has {len(turns)} turns, limit is {max_turns}")


def render_transcript(turns: Transcript) -> str:
    return "\n".join(t.render() for t in turns)
