"""Image-folder to embedding-file exporter.

Runs a frozen encoder over a class-foldered image tree plus a prompt
template over the class names, and writes the result as a FAEB embedding
file that downstream training tools consume.
"""

from faeb_exporter.export import ExportJob, ExportReport, export
from faeb_exporter.formats import FormatError, VerifyReport, verify_file

__all__ = [
    "ExportJob",
    "ExportReport",
    "export",
    "FormatError",
    "VerifyReport",
    "verify_file",
]
