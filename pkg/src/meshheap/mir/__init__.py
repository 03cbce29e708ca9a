"""Mini intermediate representation: data model, parser, printer, validator."""

from .nodes import *  # noqa: F401,F403
from .parser import MirError, format_instr, format_program, parse
from .validate import Diagnostic, load_program, validate
