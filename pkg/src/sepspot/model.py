"""Encoder + embedding head bundle and its on-disk weight manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, hidden_size
from .head import EmbeddingHead
from .tensor import Tensor

MANIFEST_VERSION = 1


class Model:
    """A window-level embedder: ``frames`` fbank frames in, one D_0 vector out.

    ``classifier`` holds the per-class columns used by the training loss; it is
    optional at search time.
    """

    def __init__(
        self,
        encoder: Encoder,
        head: EmbeddingHead,
        frames: int,
        classifier: np.ndarray | None = None,
    ):
        if head.hidden != hidden_size(encoder.config):
            raise T.ShapeError(
                f"head expects hidden size {head.hidden}, encoder produces "
                f"{hidden_size(encoder.config)}",
                axis="hidden",
            )
        self.encoder = encoder
        self.head = head
        self.frames = int(frames)
        self.classifier = (
            None if classifier is None else Tensor(np.asarray(classifier, np.float32), requires_grad=True)
        )
        encoder.output_shape(self.frames)

    @classmethod
    def init(
        cls,
        config: EncoderConfig,
        frames: int = 160,
        n_heads: int = 4,
        dim: int = 128,
        n_classes: int | None = None,
        seed: int = 0,
    ) -> "Model":
        rng = np.random.default_rng(seed)
        enc_seed, head_seed, cls_seed = rng.integers(0, 2**31, size=3)
        encoder = Encoder.init(config, int(enc_seed))
        head = EmbeddingHead.init(hidden_size(config), n_heads, dim, int(head_seed))
        classifier = None
        if n_classes is not None:
            classifier = np.random.default_rng(int(cls_seed)).standard_normal((dim, n_classes))
        return cls(encoder, head, frames, classifier)

    @property
    def c_r(self) -> int:
        return self.encoder.c_r

    @property
    def hidden_frames(self) -> int:
        """T_0^m: hidden length of one ``frames``-long window."""
        return self.encoder.output_shape(self.frames)

    def hidden(self, x, training: bool = False) -> Tensor:
        return self.encoder(x, training)

    def embed(self, x, training: bool = False) -> Tensor:
        """``x[B, 1, T, D_f] -> e[B, D_0]`` (not normalised)."""
        return self.head(self.encoder(x, training))

    __call__ = embed

    def fuse(self) -> "Model":
        return Model(self.encoder.fuse(), self.head, self.frames, self._classifier_data())

    def with_encoder(self, encoder: Encoder, frames: int | None = None) -> "Model":
        return Model(encoder, self.head, self.frames if frames is None else frames, self._classifier_data())

    def _classifier_data(self):
        return None if self.classifier is None else self.classifier.data

    def state(self) -> dict[str, np.ndarray]:
        st = dict(self.encoder.state())
        st.update(self.head.state())
        if self.classifier is not None:
            st["classifier"] = self.classifier.data
        return st


def save_model(path: str | Path, model: Model, extra: dict | None = None) -> None:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian f32 blob)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    tensors = []
    offset = 0
    chunks = []
    for name, arr in model.state().items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "version": MANIFEST_VERSION,
        "form": model.encoder.form,
        "pad_time": model.encoder.pad_time,
        "frames": model.frames,
        "n_heads": model.head.n_heads,
        "encoder": model.encoder.config.to_dict(),
        "blob": blob_path.name,
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1))


def load_model(path: str | Path) -> Model:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    config = EncoderConfig.from_dict(manifest["encoder"])
    if config.pad_time != manifest["pad_time"]:
        raise ValueError(f"{path}: pad_time disagrees with encoder config")
    encoder = Encoder.empty(config, manifest["form"])
    encoder.load(state)
    head = EmbeddingHead.from_state(state)
    return Model(encoder, head, manifest["frames"], state.get("classifier"))


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
