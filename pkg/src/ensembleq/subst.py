"""Token substitution for step commands.

Tokens look like ``$(NAME)`` where NAME is ``[A-Za-z0-9_.]+``. A literal
dollar is written ``$$``. Anything else involving ``$`` (shell arithmetic
``$((...))``, ``${var}``, command substitution with arguments) passes
through untouched, so ordinary shell syntax rarely needs escaping.
"""

from __future__ import annotations

import re
from collections.abc import Mapping

from .errors import UnboundTokenError

_TOKEN = re.compile(r"\$\(([A-Za-z0-9_.]+)\)")


def substitute(
    template: str,
    bindings: Mapping[str, str],
    *,
    partial: bool = False,
    context: str = "",
) -> str:
    """Replace ``$(NAME)`` tokens with their bindings in a single pass.

    Inserted values are not re-scanned. With ``partial=True``, unbound
    tokens and ``$$`` escapes are left intact for a later pass; otherwise
    an unbound token raises UnboundTokenError and ``$$`` collapses to
    ``$``.
    """
    out: list[str] = []
    i = 0
    n = len(template)
    while i < n:
        ch = template[i]
        if ch == "$":
            if template.startswith("$$", i):
                out.append("$$" if partial else "$")
                i += 2
                continue
            m = _TOKEN.match(template, i)
            if m:
                name = m.group(1)
                if name in bindings:
                    out.append(bindings[name])
                elif partial:
                    out.append(m.group(0))
                else:
                    raise UnboundTokenError(name, context)
                i = m.end()
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def find_tokens(template: str) -> list[str]:
    """Return token names referenced by a template, in order, escapes skipped."""
    names: list[str] = []
    i = 0
    n = len(template)
    while i < n:
        if template.startswith("$$", i):
            i += 2
            continue
        m = _TOKEN.match(template, i)
        if m:
            names.append(m.group(1))
            i = m.end()
            continue
        i += 1
    return names
