import hashlib
import json
import os
from enum import Enum
from typing import IO, Callable, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from gradfield import __version__

MANIFEST_NAME = "manifest.json"


class ChecksumTypes(Enum):
    """Enum class representing the checksum algorithms a run manifest can use.

    Attributes:
        MD5: Represents the MD5 checksum algorithm.
        SHA256: Represents the SHA-256 checksum algorithm.
        SHA512: Represents the SHA-512 checksum algorithm.
    """

    MD5 = ("MD5", hashlib.md5)
    SHA256 = ("SHA-256", hashlib.sha256)
    SHA512 = ("SHA-512", hashlib.sha512)


class Checksum(BaseModel):
    """Checksum class represents a checksum object with type and value fields.

    Attributes:
        type (str): The type of the checksum.
        value (str): The value of the checksum.
    """

    model_config = ConfigDict(
        arbitrary_types_allowed=True,
        populate_by_name=True,
    )

    type: str = Field(..., alias="@type")
    value: str = Field(..., alias="@value")

    @classmethod
    def from_file(
        cls,
        handler: IO,
        hash_fun: Callable,
        hash_algo: str,
    ) -> "Checksum":
        """Takes a file handler and returns a checksum object.

        Args:
            handler (IO): The file handler to generate the checksum for.
            hash_fun (Callable): The hash function to use for generating the checksum.
            hash_algo (str): The hash algorithm to use for generating the checksum.

        Returns:
            Checksum: A Checksum object with type and value fields.
        """

        value = cls._chunk_checksum(handler=handler, hash_fun=hash_fun)
        return cls(type=hash_algo, value=value)  # type: ignore

    @classmethod
    def from_path(cls, path: str, checksum_type: ChecksumTypes = ChecksumTypes.SHA256) -> "Checksum":
        hash_algo, hash_fun = checksum_type.value
        with open(path, "rb") as handler:
            return cls.from_file(handler, hash_fun, hash_algo)

    @staticmethod
    def _chunk_checksum(handler: IO, hash_fun: Callable, blocksize=2**20) -> str:
        m = hash_fun()
        while True:
            buf = handler.read(blocksize)

            if not isinstance(buf, bytes):
                buf = buf.encode()

            if not buf:
                break
            m.update(buf)

        handler.seek(0)

        return m.hexdigest()


class ManifestEntry(BaseModel):
    path: str
    size: int
    checksum: Checksum


class Manifest(BaseModel):
    """
    Record of one command invocation and the files it wrote.

    Attributes:
        command (str): Name of the subcommand that ran.
        seed (int): Master seed of the run.
        version (str): Package version that produced the files.
        config (Dict): The resolved run configuration.
        files (List[ManifestEntry]): Written files with sizes and checksums.
    """

    command: str
    seed: int
    version: str = __version__
    config: Dict = {}
    files: List[ManifestEntry] = []

    def verify(self, out_dir: str) -> List[str]:
        """Returns the relative paths whose current checksum no longer matches."""

        changed = []
        for entry in self.files:
            path = os.path.join(out_dir, entry.path)
            if not os.path.isfile(path):
                changed.append(entry.path)
                continue

            algo = next(t for t in ChecksumTypes if t.value[0] == entry.checksum.type)
            if Checksum.from_path(path, algo).value != entry.checksum.value:
                changed.append(entry.path)

        return changed


def write_manifest(
    out_dir: str,
    files: List[str],
    command: str,
    seed: int,
    config: Optional[Dict] = None,
    checksum_type: ChecksumTypes = ChecksumTypes.SHA256,
) -> Manifest:
    """
    Checksums the files a command wrote and stores `manifest.json` next to them.

    Args:
        out_dir (str): Output directory; entries are stored relative to it.
        files (List[str]): Paths of the written files.
        command (str): Name of the subcommand.
        seed (int): Master seed of the run.
        config (Optional[Dict]): Resolved configuration to embed.
        checksum_type (ChecksumTypes): Hash algorithm to use.

    Returns:
        Manifest: The manifest that was written.
    """

    entries = [
        ManifestEntry(
            path=os.path.relpath(path, out_dir),
            size=os.path.getsize(path),
            checksum=Checksum.from_path(path, checksum_type),
        )
        for path in sorted(set(files))
    ]

    manifest = Manifest(command=command, seed=seed, config=config or {}, files=entries)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as handle:
        json.dump(manifest.model_dump(mode="json", by_alias=True), handle, indent=2)
        handle.write("\n")

    return manifest


def read_manifest(out_dir: str) -> Manifest:
    with open(os.path.join(out_dir, MANIFEST_NAME)) as handle:
        return Manifest.model_validate(json.load(handle))
