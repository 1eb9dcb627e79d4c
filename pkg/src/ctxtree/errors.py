"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class CtxTreeError(Exception):
    """Base class for all engine errors."""


# entry format

class EntryFormatError(CtxTreeError):
    pass


class MalformedFrontmatter(EntryFormatError):
    pass


class InvalidTimestamp(EntryFormatError):
    pass


class ImportanceOutOfRange(EntryFormatError):
    pass


class InvalidPath(CtxTreeError):
    pass


# store

class RootNotFound(CtxTreeError):
    pass


class UnknownPath(CtxTreeError):
    pass


class PathEscapesRoot(InvalidPath):
    pass


class IoFailure(CtxTreeError):
    pass


# lifecycle

class NegativeElapsed(CtxTreeError, ValueError):
    pass


class EventBeforeCreation(CtxTreeError, ValueError):
    pass


class NowBeforeUpdate(CtxTreeError, ValueError):
    pass


class WeightsNotNormalized(CtxTreeError, ValueError):
    pass


# search

class EmptyQuery(CtxTreeError, ValueError):
    pass


class NegativeScore(CtxTreeError, ValueError):
    pass


# curation

class TooManyFiles(CtxTreeError):
    pass


class SourceFileNotFound(CtxTreeError, FileNotFoundError):
    pass


class BinaryFileRejected(CtxTreeError):
    pass


# adapter

class AdapterError(CtxTreeError):
    pass


class AdapterUnavailable(AdapterError):
    pass


class AdapterTimeout(AdapterError):
    pass


class ScriptExhausted(AdapterError):
    pass


class ToolValidationError(AdapterError):
    pass


# daemon

class QueueFull(CtxTreeError):
    pass


class DaemonUnreachable(CtxTreeError):
    pass


class SocketInUse(CtxTreeError):
    pass
