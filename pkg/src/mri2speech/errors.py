"""Exception types raised across the package.

Argument problems raise plain ``ValueError``; filesystem problems raise
``OSError`` subclasses.  The classes below cover domain failures callers are
expected to catch individually.
"""


class MRI2SpeechError(Exception):
    pass


class SchemaError(MRI2SpeechError, ValueError):
    """A manifest/config record is missing fields or has the wrong shape."""


class EmptyTranscriptError(MRI2SpeechError, ValueError):
    pass


class OOVError(MRI2SpeechError, KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"out-of-lexicon word: {self.word!r}"


class InfeasibleError(MRI2SpeechError, ValueError):
    """No admissible alignment exists (labels too long for the frames)."""


class StateError(MRI2SpeechError, RuntimeError):
    pass


class CompatibilityError(MRI2SpeechError, ValueError):
    """Two checkpoints cannot be combined (e.g. mismatched phoneme alphabets)."""


class EmptyTranscriptionError(MRI2SpeechError, RuntimeError):
    """The recognizer produced no words, so there is nothing to synthesize."""


class TrainingAbort(MRI2SpeechError, RuntimeError):
    def __init__(self, utterance_id: str, reason: str):
        super().__init__(f"{utterance_id}: {reason}")
        self.utterance_id = utterance_id
        self.reason = reason
