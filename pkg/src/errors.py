"""
Exception hierarchy for the FedXGB simulator.

Library modules raise these; the command line maps them to exit codes.
"""


class FedXGBError(Exception):
    """Base class for every error raised by this package"""


class ConfigurationError(FedXGBError):
    """Invalid run configuration, parameters or unsupported option"""


class FieldRangeError(FedXGBError):
    """A real value falls outside the fixed-point codec's range"""


class ThresholdError(FedXGBError):
    """Secret-sharing threshold violated (bad t or too few shares)"""


class RosterError(FedXGBError):
    """Participant roster is inconsistent (duplicates, mismatches, zero index)"""


class KeyAgreementError(FedXGBError):
    """Key agreement failed on a degenerate or malformed public key"""


class KeyPurposeError(FedXGBError):
    """A key pair was used for a purpose it was not generated for"""


class AuthenticationError(FedXGBError):
    """Ciphertext failed authentication (tampered, wrong key or wrong context)"""


class AggregationConsistencyError(FedXGBError):
    """Aggregated statistics are not additive or produced a non-finite score"""


class IncompleteRoundError(FedXGBError):
    """A required contribution (e.g. a self-mask) is missing for a live participant"""


class DomainAbortedError(FedXGBError):
    """An edge-server domain fell below its threshold and left the round"""

    def __init__(self, domain, message):
        super().__init__(message)
        self.domain = domain


class RunFailedError(FedXGBError):
    """Training could not complete (every domain aborted repeatedly)"""


class DatasetParseError(FedXGBError):
    """Malformed line in a text dataset"""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DatasetFormatError(FedXGBError):
    """Binary dataset header/count mismatch or truncated file"""
