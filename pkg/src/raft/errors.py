"""Exception taxonomy shared across the toolkit."""


class RaftError(Exception):
    """Base class for every error raised by this package."""


# --- chunk planning / manifests ---------------------------------------------

class ZeroSizeSource(RaftError):
    """A zero-byte device is not imageable."""


class InvalidChunkSize(RaftError):
    """Chunk size must be a positive byte count."""


class ManifestFormatError(RaftError):
    """Serialized manifest text does not follow the manifest-version 1 format."""


# --- hashing -----------------------------------------------------------------

class UnknownAlgorithm(RaftError):
    """Requested hash algorithm is not one of the supported set."""


class AlgorithmMismatch(RaftError):
    """Digest values of different algorithms cannot be compared."""


class SourceReadError(RaftError):
    """Reading the evidence source failed partway through.

    ``bytes_consumed`` reports how many bytes were successfully read before
    the failure.
    """

    def __init__(self, message: str, bytes_consumed: int = 0):
        super().__init__(message)
        self.bytes_consumed = bytes_consumed


class IoError(RaftError):
    """Local file I/O failed (fixture creation, store writes, split output)."""


# --- imaging -----------------------------------------------------------------

class NotFound(RaftError):
    """The descriptor's backing path does not exist."""


class LengthMismatch(RaftError):
    """Descriptor total_bytes disagrees with the actual source length."""


class PermissionDenied(RaftError):
    """The source exists but cannot be opened for reading."""


# --- wire protocol -----------------------------------------------------------

class DecodeError(RaftError):
    """Frame or message payload could not be decoded."""


class NeedMoreBytes(DecodeError):
    """The buffer holds a truncated frame; read more and retry."""


class PayloadTooLarge(RaftError):
    """Frame payload exceeds the 2^32-byte limit."""


class ProtocolViolation(RaftError):
    """A message arrived that is illegal in the current session state."""


class OutOfOrderChunk(ProtocolViolation):
    """Chunk seq is neither the next expected fresh chunk nor an awaited retransmit."""


class RetryLimitExceeded(RaftError):
    """A chunk failed verification more times than the retry limit allows."""


class DigestMismatchOnResume(RaftError):
    """A prior partial session exists but its whole-image digest differs."""


# --- transports ----------------------------------------------------------------

class ConnectionLost(RaftError):
    """The underlying byte stream dropped mid-session (recoverable via resume)."""


class ConnectFailed(RaftError):
    """Could not connect to the server endpoint."""


class BindFailed(RaftError):
    """Could not bind the listening socket."""


class InsecureTransport(RaftError):
    """Acquisition refused: endpoint lacks confidentiality/integrity/authentication."""


# --- server -------------------------------------------------------------------

class OutOfOrderAppend(RaftError):
    """Chunks must be appended to the image strictly in seq order."""


class ImageLengthMismatch(RaftError):
    """Appended image length does not equal the device's total_bytes."""


class StoreUnwritable(RaftError):
    """Evidence store root is missing or not writable."""


# --- client agent ---------------------------------------------------------------

class ScanRootMissing(RaftError):
    """Device scan root directory does not exist."""


class BadPassphrase(RaftError):
    """Unlock passphrase digest does not match the provisioned digest."""


class Locked(RaftError):
    """Too many failed unlock attempts; agent stays locked until restart."""


class NoDevices(RaftError):
    """Acquisition requested but the inventory is empty."""


class UnknownDevice(RaftError):
    """Referenced device_id is not in the inventory."""


class DeviceActive(RaftError):
    """The device is currently being acquired and cannot be re-queued."""


class DuplicatePriority(RaftError):
    """Queue priorities must be unique per device."""


class AuthRequired(RaftError):
    """A mutating control call arrived without a valid session token."""


class JobActive(RaftError):
    """An acquisition run is already in progress."""


class UnknownJob(RaftError):
    """Referenced job_id does not exist."""


class JobNotActive(RaftError):
    """The job has already finished and cannot be controlled."""


# --- timing model ----------------------------------------------------------------

class NonPositiveInput(RaftError):
    """Timing inputs must all be strictly positive."""


class IncompleteTrace(RaftError):
    """The trace lacks the events needed for an overhead decomposition."""
