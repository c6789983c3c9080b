"""Newline-delimited JSON protocol to score with an out-of-process model.

One message per line. Requests carry strictly increasing ids per
connection; the peer answers every request with the same id, in order.

    -> {"id":1,"op":"hello"}
    <- {"id":1,"caps":["score","embed"],"max_batch":64,"dims":[56,56,3]}
    -> {"id":2,"op":"score_batch","ref":"<b64 f32 LE>","queries":["<b64>",...]}
    <- {"id":2,"scores":[...]}
    -> {"id":3,"op":"embed","image":"<b64>"}
    <- {"id":3,"dim":D,"data":"<b64 f32 LE>"}
    <- {"id":N,"error":{"code":"unsupported|bad_input|internal","msg":"..."}}

The client retries a request exactly once, and only after a transport
failure (dead pipe, truncated line); error responses are never retried.
"""

from __future__ import annotations

import base64
import json
import queue
import socket
import subprocess
import sys
import threading
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, TransportError, UnsupportedError
from .scorers import Embedding, Scorer, ScorerCaps, _as_flat


def encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as exc:
        raise InvalidArgumentError(f"bad base64 payload: {exc}") from exc
    if len(raw) % 4:
        raise InvalidArgumentError("f32 payload length not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


class _Connection:
    """One stdio or TCP channel with its own monotonically increasing ids."""

    def __init__(self, command: Sequence[str] | None, address: tuple[str, int] | None):
        self._command = list(command) if command else None
        self._address = address
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._rx = None
        self._tx = None
        self._next_id = 1
        self._open()

    def _open(self) -> None:
        if self._command:
            self._proc = subprocess.Popen(
                self._command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
            self._tx = self._proc.stdin
            self._rx = self._proc.stdout
        else:
            self._sock = socket.create_connection(self._address, timeout=60)
            self._tx = self._sock.makefile("w", encoding="utf-8", newline="\n")
            self._rx = self._sock.makefile("r", encoding="utf-8")
        self._next_id = 1

    def reset(self) -> None:
        self.close()
        self._open()

    def close(self) -> None:
        for stream in (self._tx, self._rx):
            try:
                if stream is not None:
                    stream.close()
            except OSError:
                pass
        if self._proc is not None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
            self._proc = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def roundtrip(self, payload: dict) -> dict:
        req_id = self._next_id
        self._next_id += 1
        line = json.dumps({"id": req_id, **payload}, separators=(",", ":"))
        try:
            self._tx.write(line + "\n")
            self._tx.flush()
            answer = self._rx.readline()
        except (OSError, ValueError) as exc:
            raise TransportError(f"connection broke during {payload.get('op')}: {exc}") from exc
        if not answer:
            raise TransportError(f"peer closed the connection during {payload.get('op')}")
        try:
            msg = json.loads(answer)
        except json.JSONDecodeError as exc:
            raise TransportError(f"peer sent a non-JSON line: {answer[:80]!r}") from exc
        if msg.get("id") != req_id:
            raise TransportError(f"response id {msg.get('id')} does not match request id {req_id}")
        return msg


_ERROR_MAP = {
    "unsupported": UnsupportedError,
    "bad_input": InvalidArgumentError,
}


class ExternalScorer(Scorer):
    """Client for a scorer living in a child process or behind a TCP port.

    Owns a pool of connections; each connection serializes its own
    request/response stream, so concurrent submitters are safe. Batches
    are chunked to the peer's max_batch and reassembled in order.
    """

    def __init__(
        self,
        command: Sequence[str] | None = None,
        address: tuple[str, int] | None = None,
        pool_size: int = 1,
    ):
        if (command is None) == (address is None):
            raise InvalidArgumentError("pass exactly one of command= or address=")
        if pool_size < 1:
            raise InvalidArgumentError("pool_size must be >= 1")
        self._pool: queue.Queue[_Connection] = queue.Queue()
        self._all: list[_Connection] = []
        for _ in range(pool_size):
            conn = _Connection(command, address)
            self._all.append(conn)
            self._pool.put(conn)
        self._lock = threading.Lock()
        hello = self._call({"op": "hello"})
        caps = hello.get("caps", [])
        self._caps = ScorerCaps(
            can_embed="embed" in caps,
            can_grad=False,
            max_batch=int(hello.get("max_batch", 1)),
        )
        dims = hello.get("dims")
        if not isinstance(dims, list) or len(dims) != 3:
            raise TransportError(f"hello response carries no usable dims: {hello}")
        self.dims = tuple(int(d) for d in dims)

    @property
    def caps(self) -> ScorerCaps:
        return self._caps

    def _call(self, payload: dict) -> dict:
        conn = self._pool.get()
        try:
            try:
                msg = conn.roundtrip(payload)
            except TransportError:
                # Single retry on a fresh connection; value disagreements
                # and protocol errors are never retried.
                conn.reset()
                msg = conn.roundtrip(payload)
        finally:
            self._pool.put(conn)
        if "error" in msg:
            err = msg["error"]
            exc_type = _ERROR_MAP.get(err.get("code"), TransportError)
            raise exc_type(f"peer error: {err.get('msg', err)}")
        return msg

    def _encode_image(self, image) -> str:
        return encode_f32(_as_flat(image, self.dims))

    def score(self, ref, query) -> float:
        return float(self.score_batch(ref, [query])[0])

    def score_batch(self, ref, queries: Sequence) -> np.ndarray:
        ref_b64 = self._encode_image(ref)
        encoded = [self._encode_image(q) for q in queries]
        scores = np.empty(len(encoded), dtype=np.float64)
        step = self._caps.max_batch
        for start in range(0, len(encoded), step):
            chunk = encoded[start:start + step]
            msg = self._call({"op": "score_batch", "ref": ref_b64, "queries": chunk})
            got = msg.get("scores")
            if not isinstance(got, list) or len(got) != len(chunk):
                raise TransportError(f"score_batch returned {got!r} for a chunk of {len(chunk)}")
            scores[start:start + len(chunk)] = got
        return scores

    def embed(self, image) -> Embedding:
        if not self._caps.can_embed:
            raise UnsupportedError("external scorer does not advertise embed")
        msg = self._call({"op": "embed", "image": self._encode_image(image)})
        vec = decode_f32(msg.get("data", ""))
        if msg.get("dim") != vec.size:
            raise TransportError(f"embed dim field {msg.get('dim')} mismatches payload size {vec.size}")
        return Embedding(vec)

    def close(self) -> None:
        with self._lock:
            for conn in self._all:
                conn.close()
            self._all.clear()


# ---------------------------------------------------------------------------
# Reference stub server wrapping an in-process scorer
# ---------------------------------------------------------------------------


def _error_line(req_id: int, code: str, msg: str) -> str:
    return json.dumps({"id": req_id, "error": {"code": code, "msg": msg}}, separators=(",", ":"))


def _handle_line(line: str, scorer: Scorer, max_batch: int, last_id: list[int]) -> str:
    try:
        msg = json.loads(line)
        req_id = int(msg["id"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        return _error_line(0, "bad_input", "unparseable request line")
    if req_id <= last_id[0]:
        return _error_line(req_id, "bad_input", f"ids must increase, got {req_id} after {last_id[0]}")
    last_id[0] = req_id

    op = msg.get("op")
    h, w, c = scorer.dims
    try:
        if op == "hello":
            caps = ["score"] + (["embed"] if scorer.caps.can_embed else [])
            return json.dumps(
                {"id": req_id, "caps": caps, "max_batch": max_batch, "dims": [h, w, c]},
                separators=(",", ":"),
            )
        if op == "score_batch":
            ref = decode_f32(msg["ref"]).reshape(h, w, c)
            raw_queries = msg["queries"]
            if len(raw_queries) > max_batch:
                raise InvalidArgumentError(f"batch of {len(raw_queries)} exceeds max_batch {max_batch}")
            queries = [decode_f32(q).reshape(h, w, c) for q in raw_queries]
            scores = scorer.score_batch(ref, queries)
            return json.dumps({"id": req_id, "scores": [float(s) for s in scores]}, separators=(",", ":"))
        if op == "embed":
            emb = scorer.embed(decode_f32(msg["image"]).reshape(h, w, c))
            return json.dumps(
                {"id": req_id, "dim": emb.dim, "data": encode_f32(emb.data)},
                separators=(",", ":"),
            )
        return _error_line(req_id, "bad_input", f"unknown op {op!r}")
    except UnsupportedError as exc:
        return _error_line(req_id, "unsupported", str(exc))
    except (InvalidArgumentError, KeyError, ValueError) as exc:
        return _error_line(req_id, "bad_input", str(exc))
    except Exception as exc:  # pragma: no cover - defensive
        return _error_line(req_id, "internal", str(exc))


def serve_stdio(scorer: Scorer, max_batch: int = 64) -> None:
    """Serve one connection over stdin/stdout until EOF."""
    last_id = [0]
    for line in sys.stdin:
        if not line.strip():
            continue
        sys.stdout.write(_handle_line(line, scorer, max_batch, last_id) + "\n")
        sys.stdout.flush()


class TcpServer:
    """TCP front end for a scorer; one handler thread per connection."""

    def __init__(self, scorer: Scorer, port: int = 0, max_batch: int = 64):
        self._scorer = scorer
        self._max_batch = max_batch
        self._server = socket.create_server(("127.0.0.1", port))
        self._server.settimeout(0.2)
        self.port: int = self._server.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _handle(self, conn: socket.socket) -> None:
        last_id = [0]
        with conn, conn.makefile("r", encoding="utf-8") as rx, conn.makefile("w", encoding="utf-8") as tx:
            for line in rx:
                if not line.strip():
                    continue
                tx.write(_handle_line(line, self._scorer, self._max_batch, last_id) + "\n")
                tx.flush()

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._server.accept()
                except TimeoutError:
                    continue
                threading.Thread(target=self._handle, args=(conn,), daemon=True).start()
        finally:
            self._server.close()

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
