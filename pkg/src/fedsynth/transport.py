"""Length-prefixed federation messages over a local stream socket.

Frame: ``uint64 little-endian body length`` then the body, whose first byte
is the message type.  Parameter payloads use the checkpoint encoding with a
``generator`` and a ``discriminator`` set.

    ROUND_BEGIN   uint32 round_index, payload
    SUBMIT        uint16 id length, UTF-8 client_id, uint64 dataset_size, payload
    ROUND_RESULT  uint32 round_index, payload
    SHUTDOWN      (empty)
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from typing import Sequence

from . import checkpoint
from .federation import ClientState, RoundRecord, aggregation_weights, fedgan_aggregate
from .models import ParameterSet, export_parameters, import_parameters
from .training import epoch_rng, train_local_epoch

ROUND_BEGIN = 1
SUBMIT = 2
ROUND_RESULT = 3
SHUTDOWN = 4

_LEN = struct.Struct("<Q")


class ProtocolError(RuntimeError):
    pass


@dataclass
class Message:
    kind: int
    round_index: int = -1
    client_id: str = ""
    dataset_size: int = 0
    generator: ParameterSet | None = None
    discriminator: ParameterSet | None = None


def _payload(msg: Message) -> bytes:
    return checkpoint.encode({"generator": msg.generator, "discriminator": msg.discriminator})


def _unpayload(blob: bytes) -> tuple[ParameterSet, ParameterSet]:
    sets, _ = checkpoint.decode(blob)
    return sets["generator"], sets["discriminator"]


def encode_message(msg: Message) -> bytes:
    kind = bytes([msg.kind])
    if msg.kind in (ROUND_BEGIN, ROUND_RESULT):
        body = kind + struct.pack("<I", msg.round_index) + _payload(msg)
    elif msg.kind == SUBMIT:
        cid = msg.client_id.encode("utf-8")
        body = kind + struct.pack("<H", len(cid)) + cid + struct.pack("<Q", msg.dataset_size) + _payload(msg)
    elif msg.kind == SHUTDOWN:
        body = kind
    else:
        raise ProtocolError(f"unknown message type {msg.kind}")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Message:
    if not body:
        raise ProtocolError("empty message body")
    kind = body[0]
    if kind in (ROUND_BEGIN, ROUND_RESULT):
        (r,) = struct.unpack_from("<I", body, 1)
        g, d = _unpayload(body[5:])
        return Message(kind, round_index=r, generator=g, discriminator=d)
    if kind == SUBMIT:
        (n,) = struct.unpack_from("<H", body, 1)
        cid = body[3 : 3 + n].decode("utf-8")
        (size,) = struct.unpack_from("<Q", body, 3 + n)
        g, d = _unpayload(body[11 + n :])
        return Message(kind, client_id=cid, dataset_size=size, generator=g, discriminator=d)
    if kind == SHUTDOWN:
        return Message(kind)
    raise ProtocolError(f"unknown message type {kind}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket) -> Message:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return decode_body(_recv_exact(sock, length))


class FederationServer:
    """Accepts ``n_clients`` connections and runs barrier-synchronised rounds."""

    def __init__(self, n_clients: int, initial: tuple[ParameterSet, ParameterSet], weighting: str = "size", host: str = "127.0.0.1", port: int = 0):
        self.n_clients = n_clients
        self.global_g, self.global_d = initial
        self.weighting = weighting
        self.records: list[RoundRecord] = []
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()

    def serve(self, num_rounds: int, start_round: int = 0) -> None:
        conns = []
        try:
            for _ in range(self.n_clients):
                conn, _ = self._listener.accept()
                conns.append(conn)
            for r in range(start_round, start_round + num_rounds):
                for c in conns:
                    send_message(c, Message(ROUND_BEGIN, r, generator=self.global_g, discriminator=self.global_d))
                # barrier: every client submits before aggregation starts
                subs = sorted((recv_message(c) for c in conns), key=lambda m: m.client_id)
                if any(m.kind != SUBMIT for m in subs):
                    raise ProtocolError("expected SUBMIT from every client")
                weights = aggregation_weights([m.dataset_size for m in subs], self.weighting)
                self.global_g = fedgan_aggregate([m.generator for m in subs], weights)
                self.global_d = fedgan_aggregate([m.discriminator for m in subs], weights)
                self.records.append(
                    RoundRecord(
                        round_index=r,
                        client_ids=[m.client_id for m in subs],
                        weights=weights,
                        aggregated_g=self.global_g,
                        aggregated_d=self.global_d,
                        client_digests=[m.generator.digest() + ":" + m.discriminator.digest() for m in subs],
                    )
                )
                for c in conns:
                    send_message(c, Message(ROUND_RESULT, r, generator=self.global_g, discriminator=self.global_d))
            for c in conns:
                send_message(c, Message(SHUTDOWN))
        finally:
            for c in conns:
                c.close()
            self._listener.close()


def run_client(client: ClientState, address, train_lock: threading.Lock | None = None) -> None:
    """Client side: train one local epoch per ROUND_BEGIN and submit the weights."""
    with socket.create_connection(address) as sock:
        while True:
            msg = recv_message(sock)
            if msg.kind == SHUTDOWN:
                return
            if msg.kind != ROUND_BEGIN:
                raise ProtocolError(f"client {client.client_id}: unexpected message type {msg.kind}")
            import_parameters(client.generator, msg.generator)
            import_parameters(client.discriminator, msg.discriminator)
            lock = train_lock or threading.Lock()
            with lock:
                train_local_epoch(
                    client.generator, client.discriminator, client.dataset, client.hyper,
                    msg.round_index, epoch_rng(client.hyper.seed, msg.round_index), client.optimizers,
                )
            send_message(
                sock,
                Message(
                    SUBMIT,
                    client_id=client.client_id,
                    dataset_size=client.dataset_size,
                    generator=export_parameters(client.generator),
                    discriminator=export_parameters(client.discriminator),
                ),
            )
            result = recv_message(sock)
            if result.kind != ROUND_RESULT:
                raise ProtocolError(f"client {client.client_id}: expected ROUND_RESULT")
            import_parameters(client.generator, result.generator)
            import_parameters(client.discriminator, result.discriminator)


def run_socket_federation(clients: Sequence[ClientState], num_rounds: int, weighting: str = "size", start_round: int = 0):
    """Same protocol as :func:`federation.run_federated_training`, over localhost TCP.

    Client training is serialised through a lock so the outcome matches the
    in-process simulation bit for bit.
    """
    initial = (export_parameters(clients[0].generator), export_parameters(clients[0].discriminator))
    server = FederationServer(len(clients), initial, weighting)
    errors: list[BaseException] = []

    def guarded(fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    lock = threading.Lock()
    threads = [threading.Thread(target=guarded, args=(server.serve, num_rounds, start_round))]
    threads += [threading.Thread(target=guarded, args=(run_client, c, server.address, lock)) for c in clients]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return (server.global_g, server.global_d), server.records
