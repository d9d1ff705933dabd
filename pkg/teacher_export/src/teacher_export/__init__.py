"""Teacher activation export: frozen transformer taps in the trainer's format."""

from .export import ExportJob, Transcript, build_stub, export, load_transcripts
from .tensorfile import read_tensor, write_tensor
from .verify import VerifyReport, verify_export

__all__ = [
    "ExportJob", "Transcript", "build_stub", "export", "load_transcripts",
    "read_tensor", "write_tensor", "VerifyReport", "verify_export",
]
