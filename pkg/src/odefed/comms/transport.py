"""Process-separated federation over TCP.

Per connection::

    client -> HELLO(client_id, digest | u32 n_k | u32 C)
    server -> HELLO(seed u64)            or BYE(reason) on rejection
    each round the client is sampled:
    server -> GLOBAL_PARAMS(t, k, container)
    client -> LOCAL_PARAMS(t, k, container), METRICS(t, k, f64 final loss)
    server -> BYE when all rounds are done

Only the two parameter frames count toward a round's byte total, so it equals
``2 * |S_t| * (13 + container size)``, the same figure the in-process driver
reports.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from ..data import Dataset
from ..federated import (
    ClientSpec,
    FedConfig,
    FedHistory,
    RoundMetrics,
    aggregate_round,
    check_compatible,
    client_update,
    evaluate,
    sample_clients,
    server_pool,
)
from ..models import ModelConfig, build_model
from ..paramset import ParameterSet
from .checkpoint import DIGEST_BYTES, DigestMismatchError, config_digest, load_params, serialize_params
from .wire import MsgType, ProtocolError, WireMessage, recv_message, send_message

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0
_HELLO = struct.Struct(f"<{DIGEST_BYTES}sII")


class RoundAbortedError(RuntimeError):
    pass


@dataclass
class _Peer:
    sock: socket.socket
    client_id: int
    n_k: int
    iterations: int


class FedServer:
    """Binds on construction so callers can read :attr:`address` before :meth:`run`."""

    def __init__(
        self,
        address: tuple[str, int],
        fed: FedConfig,
        global_config: ModelConfig,
        eval_dataset: Dataset,
        server_data: Optional[Dataset] = None,
        init_params: Optional[ParameterSet] = None,
        timeout: float = DEFAULT_TIMEOUT,
        on_round: Optional[Callable[[RoundMetrics], None]] = None,
    ):
        self.fed = fed
        self.config = global_config
        self.eval_dataset = eval_dataset
        self.server_data = server_data
        self.init_params = init_params
        self.timeout = timeout
        self.on_round = on_round
        self.rejected: list[str] = []
        self._listener = socket.create_server(address)
        self._listener.settimeout(timeout)
        self.address = self._listener.getsockname()[:2]

    def close(self) -> None:
        self._listener.close()

    def _register(self) -> dict[int, _Peer]:
        peers: dict[int, _Peer] = {}
        digest = config_digest(self.config)
        while len(peers) < self.fed.clients:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                raise RoundAbortedError(
                    f"only {len(peers)} of {self.fed.clients} clients connected within {self.timeout}s"
                ) from None
            conn.settimeout(self.timeout)
            try:
                hello = recv_message(conn)
                if hello.type != MsgType.HELLO or len(hello.payload) != _HELLO.size:
                    raise ProtocolError(f"expected HELLO, got {hello.type.name}")
                their_digest, n_k, iterations = _HELLO.unpack(hello.payload)
                k = hello.client_id
                if their_digest != digest:
                    reason = f"digest mismatch: client {k} model shape differs from the server's"
                elif not 0 <= k < self.fed.clients or k in peers:
                    reason = f"client id {k} is out of range or already registered"
                elif n_k < 1 or iterations < 1:
                    reason = f"client {k} announced n_k={n_k}, C={iterations}"
                else:
                    reason = ""
                if reason:
                    log.warning("rejecting connection: %s", reason)
                    self.rejected.append(reason)
                    send_message(conn, WireMessage(MsgType.BYE, 0, k, reason.encode()))
                    conn.close()
                    continue
                send_message(conn, WireMessage(MsgType.HELLO, 0, k, struct.pack("<Q", self.fed.seed)))
                peers[k] = _Peer(conn, k, n_k, iterations)
            except (ProtocolError, OSError) as exc:
                log.warning("dropping connection during handshake: %s", exc)
                conn.close()
        return peers

    def _exchange(self, peer: _Peer, t: int, blob: bytes):
        sent = send_message(peer.sock, WireMessage(MsgType.GLOBAL_PARAMS, t, peer.client_id, blob))
        local = recv_message(peer.sock)
        if local.type != MsgType.LOCAL_PARAMS or local.round != t or local.client_id != peer.client_id:
            raise ProtocolError(f"client {peer.client_id}: expected LOCAL_PARAMS for round {t}, got {local.type.name}")
        metrics = recv_message(peer.sock)
        if metrics.type != MsgType.METRICS or len(metrics.payload) != 8:
            raise ProtocolError(f"client {peer.client_id}: expected METRICS, got {metrics.type.name}")
        cfg = self.config.with_iterations(peer.iterations) if self.config.is_ode else self.config
        params = load_params(local.payload, cfg)
        (loss,) = struct.unpack("<d", metrics.payload)
        return params, loss, sent + local.wire_size

    def run(self) -> FedHistory:
        fed = self.fed
        peers = self._register()
        params = self.init_params.clone() if self.init_params is not None else build_model(self.config, fed.seed).params
        check_compatible(params, self.config)
        pool = server_pool(self.server_data, fed.feddf.budget, fed.seed) if fed.algorithm == "feddf" else None
        history = FedHistory()
        try:
            with ThreadPoolExecutor(max_workers=max(1, len(peers))) as pool_exec:
                for t in range(1, fed.rounds + 1):
                    selected = sample_clients(fed.clients, fed.fraction, fed.seed, t)
                    blob = serialize_params(params, self.config)
                    futures = [pool_exec.submit(self._exchange, peers[k], t, blob) for k in selected]
                    try:
                        results = [f.result() for f in futures]
                    except (socket.timeout, TimeoutError) as exc:
                        raise RoundAbortedError(f"round {t} timed out after {self.timeout}s") from exc
                    locals_ = [r[0] for r in results]
                    n_k = [peers[k].n_k for k in selected]
                    configs = [self.config.with_iterations(peers[k].iterations) for k in selected]
                    params = aggregate_round(fed, self.config, configs, locals_, n_k, pool, t)
                    loss, top1, top5 = evaluate(params, self.config, None, self.eval_dataset)
                    metrics = RoundMetrics(t, selected, [r[1] for r in results], loss, top1, top5, sum(r[2] for r in results))
                    log.info("round %d: clients=%s bytes=%d loss=%.4f", t, selected, metrics.bytes, loss)
                    history.append(metrics)
                    if self.on_round is not None:
                        self.on_round(metrics)
        finally:
            for peer in peers.values():
                try:
                    send_message(peer.sock, WireMessage(MsgType.BYE, fed.rounds, peer.client_id))
                except OSError:
                    pass
                peer.sock.close()
            self.close()
        history.params = params
        return history


def serve(address: tuple[str, int], fed: FedConfig, global_config: ModelConfig, eval_dataset: Dataset, **kwargs) -> FedHistory:
    return FedServer(address, fed, global_config, eval_dataset, **kwargs).run()


def connect_client(
    address: tuple[str, int],
    client: ClientSpec,
    config: ModelConfig,
    shard: Sequence[int],
    dataset: Dataset,
    timeout: float = DEFAULT_TIMEOUT,
) -> int:
    """Serve local updates until the server says BYE; returns the number of rounds trained.

    ``config`` is this client's own model (its ``iterations`` is the local C).
    """
    spec = ClientSpec(client.client_id, config.iterations, client.epochs, client.batch_size, client.lr)
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.settimeout(timeout)
        hello = _HELLO.pack(config_digest(config), len(shard), config.iterations)
        send_message(sock, WireMessage(MsgType.HELLO, 0, client.client_id, hello))
        reply = recv_message(sock)
        if reply.type == MsgType.BYE:
            reason = reply.payload.decode(errors="replace")
            if reason.startswith("digest"):
                raise DigestMismatchError(reason)
            raise ProtocolError(f"server rejected client {client.client_id}: {reason}")
        if reply.type != MsgType.HELLO:
            raise ProtocolError(f"expected HELLO reply, got {reply.type.name}")
        (seed,) = struct.unpack("<Q", reply.payload)
        rounds = 0
        while True:
            msg = recv_message(sock)
            if msg.type == MsgType.BYE:
                return rounds
            if msg.type != MsgType.GLOBAL_PARAMS:
                raise ProtocolError(f"unexpected {msg.type.name} from server")
            params = load_params(msg.payload, config)
            local, loss = client_update(params, spec, shard, dataset, config, seed, msg.round)
            send_message(sock, WireMessage(MsgType.LOCAL_PARAMS, msg.round, client.client_id, serialize_params(local, config)))
            send_message(sock, WireMessage(MsgType.METRICS, msg.round, client.client_id, struct.pack("<d", loss)))
            rounds += 1


def run_loopback(
    fed: FedConfig,
    global_config: ModelConfig,
    clients: Sequence[ClientSpec],
    partition,
    dataset: Dataset,
    eval_dataset: Dataset,
    server_data: Optional[Dataset] = None,
    timeout: float = DEFAULT_TIMEOUT,
    on_round: Optional[Callable[[RoundMetrics], None]] = None,
) -> FedHistory:
    """Server plus one thread per client on 127.0.0.1; the socket-mode counterpart of ``run_fedavg``."""
    server = FedServer(("127.0.0.1", 0), fed, global_config, eval_dataset, server_data=server_data, timeout=timeout, on_round=on_round)
    errors: list[BaseException] = []

    def client_main(spec: ClientSpec):
        try:
            connect_client(server.address, spec, spec.model_config(global_config), partition.assignments[spec.client_id], dataset, timeout)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=client_main, args=(c,), daemon=True) for c in sorted(clients, key=lambda c: c.client_id)]
    for th in threads:
        th.start()
    try:
        history = server.run()
    finally:
        for th in threads:
            th.join(timeout)
    if errors:
        raise errors[0]
    return history
