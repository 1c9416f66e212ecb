"""ANSI color utilities for terminal output.

Respects the ``NO_COLOR`` environment variable (https://no-color.org/) and
degrades to plain text when the output stream is not a TTY (e.g. piped to
a file or captured by tests).

Color scheme:
  - Green:   selected candidate, passing values
  - Yellow:  partial failures, warnings
  - Red:     disqualified candidates, errors
  - Cyan:    headers and section titles
"""

from __future__ import annotations

import os
import sys


# ---------------------------------------------------------------------------
# Detect whether color output is supported
# ---------------------------------------------------------------------------

def _color_enabled() -> bool:
    """Return True if ANSI color output should be used."""
    if os.environ.get("NO_COLOR"):
        return False
    if not hasattr(sys.stdout, "isatty") or not sys.stdout.isatty():
        return False
    if sys.platform == "win32":
        try:
            import ctypes
            kernel32 = ctypes.windll.kernel32  # type: ignore[attr-defined]
            handle = kernel32.GetStdHandle(-11)  # STD_OUTPUT_HANDLE
            mode = ctypes.c_ulong()
            kernel32.GetConsoleMode(handle, ctypes.byref(mode))
            kernel32.SetConsoleMode(handle, mode.value | 0x0004)  # VT processing
        except Exception:
            pass
    return True


USE_COLOR: bool = _color_enabled()


_RESET = "\033[0m"
_BOLD = "\033[1m"
_RED = "\033[91m"
_GREEN = "\033[92m"
_YELLOW = "\033[93m"
_CYAN = "\033[96m"


def _wrap(code: str, text: str) -> str:
    return f"{code}{text}{_RESET}" if USE_COLOR else text


def red(text: str) -> str:
    return _wrap(_RED, text)


def green(text: str) -> str:
    return _wrap(_GREEN, text)


def yellow(text: str) -> str:
    return _wrap(_YELLOW, text)


def cyan(text: str) -> str:
    return _wrap(_CYAN, text)


def bold(text: str) -> str:
    return _wrap(_BOLD, text)


# ---------------------------------------------------------------------------
# Report colorizers
# ---------------------------------------------------------------------------

def colorize_candidate(text: str, selected: bool, disqualified: bool) -> str:
    """Winner green and bold, disqualified red, others plain."""
    if selected:
        return bold(green(text))
    if disqualified:
        return red(text)
    return text


def colorize_failures(count: int, total: int) -> str:
    """``failed/total``: plain when zero, yellow below half, red above."""
    text = f"{count}/{total}" if total else str(count)
    if count == 0:
        return text
    if total and count * 2 > total:
        return red(text)
    return yellow(text)
