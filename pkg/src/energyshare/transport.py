"""Message delivery and peer discovery between device processes.

Two interchangeable transports stand in for the short-range radio link:

* :class:`SimTransport`: deterministic in-process delivery driven by a
  :class:`VirtualClock`: a message sent at t is receivable at t + latency,
  in timestamp order with ties broken by send order.
* :class:`TcpTransport`: loopback TCP with one line-encoded message per
  send and a small registry server for discovery, so device processes
  stay genuinely separate.

Both satisfy the same contract: FIFO per sender/receiver pair, no
duplication, no loss unless a drop probability is configured.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass

from .battery import Technology
from .errors import EnergyShareError
from .matching import ProviderAdvert
from .protocol import ProtocolMessage, decode_message, encode_message
from .util import check_id, fmt_bool, fmt_float, parse_bool, parse_fields

DEFAULT_LATENCY_S = 0.05


class DuplicateDevice(EnergyShareError):
    """A device id is already registered/advertised under another address."""


class PeerUnreachable(EnergyShareError):
    """The destination device is unknown or has deregistered."""


class WallClockNotSteppable(EnergyShareError):
    """advance() was called on the wall clock."""


@dataclass(frozen=True)
class Endpoint:
    device_id: str
    address: str


class VirtualClock:
    """Explicitly stepped simulation time; never advances on its own."""

    mode = "virtual"

    def __init__(self, start_s: float = 0.0):
        self._now_s = start_s

    @property
    def now_s(self) -> float:
        return self._now_s

    def advance(self, dt_s: float) -> float:
        if dt_s <= 0:
            raise ValueError(f"dt_s must be > 0, got {dt_s!r}")
        self._now_s += dt_s
        return self._now_s


class WallClock:
    """Real time; read-only."""

    mode = "wall"

    @property
    def now_s(self) -> float:
        return time.time()

    def advance(self, dt_s: float) -> float:
        raise WallClockNotSteppable("wall clock cannot be stepped explicitly")


# --- advert wire encoding (shared by the registry protocol) ------------------


def encode_advert(advert: ProviderAdvert) -> str:
    return (
        f"provider_id={advert.provider_id}"
        f" x={fmt_float(advert.position[0])} y={fmt_float(advert.position[1])}"
        f" level_pct={fmt_float(advert.battery_level_pct)}"
        f" technology={advert.technology.value}"
        f" available={fmt_bool(advert.available)}"
    )


def decode_advert(text: str) -> ProviderAdvert:
    fields = parse_fields(text.split(" "))
    return ProviderAdvert(
        provider_id=check_id(fields["provider_id"]),
        position=(float(fields["x"]), float(fields["y"])),
        battery_level_pct=float(fields["level_pct"]),
        technology=Technology(fields["technology"]),
        available=parse_bool(fields["available"]),
    )


# --- deterministic in-process transport ---------------------------------------


class SimTransport:
    """Virtual-clock transport: all state in-process, fully deterministic.

    Messages are encoded and decoded through the real wire format on every
    send so anything unencodable fails here too. A configured drop
    probability (seeded) silently discards sends to exercise loss
    handling; the default is lossless.
    """

    def __init__(
        self,
        clock: VirtualClock,
        latency_s: float = DEFAULT_LATENCY_S,
        drop_probability: float = 0.0,
        seed: int = 0,
    ):
        if latency_s < 0:
            raise ValueError(f"latency_s must be >= 0, got {latency_s!r}")
        if not 0.0 <= drop_probability <= 1.0:
            raise ValueError(f"drop_probability must be in [0, 1], got {drop_probability!r}")
        self.clock = clock
        self.latency_s = latency_s
        self.drop_probability = drop_probability
        self._rng = random.Random(seed)
        self._endpoints: dict[str, Endpoint] = {}
        self._adverts: dict[str, tuple[ProviderAdvert, str]] = {}
        self._inboxes: dict[str, list[tuple[float, int, str]]] = {}
        self._seq = itertools.count()

    def register(self, device_id: str) -> Endpoint:
        check_id(device_id, "device_id")
        if device_id in self._endpoints:
            return self._endpoints[device_id]
        endpoint = Endpoint(device_id, f"sim:{device_id}")
        self._endpoints[device_id] = endpoint
        self._inboxes[device_id] = []
        return endpoint

    def deregister(self, endpoint: Endpoint) -> None:
        self._endpoints.pop(endpoint.device_id, None)
        self._inboxes.pop(endpoint.device_id, None)
        self._adverts.pop(endpoint.device_id, None)

    def _require_registered(self, endpoint: Endpoint) -> None:
        known = self._endpoints.get(endpoint.device_id)
        if known is None or known.address != endpoint.address:
            raise PeerUnreachable(f"endpoint {endpoint.device_id!r} is not registered")

    def advertise(self, endpoint: Endpoint, advert: ProviderAdvert) -> None:
        self._require_registered(endpoint)
        existing = self._adverts.get(advert.provider_id)
        if existing is not None and existing[1] != endpoint.address:
            raise DuplicateDevice(
                f"{advert.provider_id!r} already advertises from {existing[1]}"
            )
        self._adverts[advert.provider_id] = (advert, endpoint.address)

    def discover(self, endpoint: Endpoint) -> list[ProviderAdvert]:
        """Snapshot of currently advertised, available providers."""
        self._require_registered(endpoint)
        available = [a for a, _ in self._adverts.values() if a.available]
        available.sort(key=lambda a: a.provider_id)
        return available

    def send(self, frm: Endpoint, to: str, msg: ProtocolMessage) -> None:
        """Queue ``msg`` for ``to`` (a device id) at now + latency."""
        self._require_registered(frm)
        if to not in self._endpoints:
            raise PeerUnreachable(f"peer {to!r} is not registered")
        line = encode_message(msg)
        if self.drop_probability > 0.0 and self._rng.random() < self.drop_probability:
            return
        deliver_at = self.clock.now_s + self.latency_s
        heapq.heappush(self._inboxes[to], (deliver_at, next(self._seq), line))

    def receive(self, endpoint: Endpoint) -> list[ProtocolMessage]:
        """Drain all messages due at the current virtual time, in order."""
        self._require_registered(endpoint)
        inbox = self._inboxes[endpoint.device_id]
        due: list[ProtocolMessage] = []
        while inbox and inbox[0][0] <= self.clock.now_s:
            _, _, line = heapq.heappop(inbox)
            due.append(decode_message(line))
        return due

    def next_delivery_time(self) -> float | None:
        """Earliest pending delivery time across all inboxes, if any."""
        pending = [inbox[0][0] for inbox in self._inboxes.values() if inbox]
        return min(pending) if pending else None


# --- TCP loopback transport ----------------------------------------------------


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class RegistryServer:
    """Discovery registry for the TCP transport (the confined-area lookup).

    Line protocol, one command per line:

        REGISTER device_id=<id> addr=<host:port>
        DEREGISTER device_id=<id>
        ADVERTISE addr=<host:port> <advert fields>
        DISCOVER
        RESOLVE device_id=<id>

    Responses are ``OK ...`` / ``ERR <code> <detail>``; DISCOVER answers
    with one ``ADVERT <fields>`` line per advert followed by ``END``;
    RESOLVE answers ``ADDR <host:port>``. All updates happen under one
    lock, so a DISCOVER snapshot never sees a half-applied advert.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._devices: dict[str, str] = {}
        self._adverts: dict[str, tuple[ProviderAdvert, str]] = {}
        self._lock = threading.Lock()
        self._server = socket.create_server((host, port))
        self.address = f"{host}:{self._server.getsockname()[1]}"
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._accept_loop, name="registry-accept", daemon=True
        )

    def start(self) -> "RegistryServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._server.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        try:
            with conn, conn.makefile("rw", encoding="utf-8", newline="\n") as stream:
                for raw in stream:
                    line = raw.strip()
                    if not line:
                        continue
                    try:
                        replies = self._handle(line)
                    except Exception as exc:  # malformed input must not kill the registry
                        replies = [f"ERR Malformed {exc}"]
                    stream.write("\n".join(replies) + "\n")
                    stream.flush()
        except OSError:
            return

    def _handle(self, line: str) -> list[str]:
        command, _, rest = line.partition(" ")
        if command == "REGISTER":
            fields = parse_fields(rest.split(" "))
            device_id, addr = check_id(fields["device_id"]), fields["addr"]
            with self._lock:
                known = self._devices.get(device_id)
                if known is not None and known != addr:
                    return [f"ERR DuplicateDevice {device_id} already at {known}"]
                self._devices[device_id] = addr
            return ["OK"]
        if command == "DEREGISTER":
            fields = parse_fields(rest.split(" "))
            device_id = fields["device_id"]
            with self._lock:
                self._devices.pop(device_id, None)
                self._adverts.pop(device_id, None)
            return ["OK"]
        if command == "ADVERTISE":
            tokens = rest.split(" ")
            addr_field = parse_fields(tokens[:1])
            advert = decode_advert(" ".join(tokens[1:]))
            with self._lock:
                existing = self._adverts.get(advert.provider_id)
                if existing is not None and existing[1] != addr_field["addr"]:
                    return [
                        f"ERR DuplicateDevice {advert.provider_id} already at {existing[1]}"
                    ]
                self._adverts[advert.provider_id] = (advert, addr_field["addr"])
            return ["OK"]
        if command == "DISCOVER":
            return [f"ADVERT {encode_advert(a)}" for a in self.snapshot()] + ["END"]
        if command == "RESOLVE":
            fields = parse_fields(rest.split(" "))
            with self._lock:
                addr = self._devices.get(fields["device_id"])
            if addr is None:
                return [f"ERR Unknown {fields['device_id']}"]
            return [f"ADDR {addr}"]
        return [f"ERR Malformed unknown command {command!r}"]

    def snapshot(self) -> list[ProviderAdvert]:
        with self._lock:
            available = [a for a, _ in self._adverts.values() if a.available]
        available.sort(key=lambda a: a.provider_id)
        return available


class _RegistryClient:
    """One-shot command client against the registry server."""

    def __init__(self, registry_addr: str):
        self._addr = parse_addr(registry_addr)

    def _exchange(self, command: str, multiline: bool = False) -> list[str]:
        with socket.create_connection(self._addr, timeout=10.0) as conn:
            with conn.makefile("rw", encoding="utf-8", newline="\n") as stream:
                stream.write(command + "\n")
                stream.flush()
                lines: list[str] = []
                for raw in stream:
                    line = raw.strip()
                    if not multiline:
                        return [line]
                    if line == "END":
                        return lines
                    lines.append(line)
        raise PeerUnreachable("registry connection closed mid-response")

    def command(self, line: str) -> str:
        reply = self._exchange(line)[0]
        if reply.startswith("ERR DuplicateDevice"):
            raise DuplicateDevice(reply)
        return reply

    def discover(self) -> list[ProviderAdvert]:
        lines = self._exchange("DISCOVER", multiline=True)
        return [decode_advert(line[len("ADVERT "):]) for line in lines]

    def resolve(self, device_id: str) -> str | None:
        reply = self._exchange(f"RESOLVE device_id={device_id}")[0]
        if reply.startswith("ADDR "):
            return reply[len("ADDR "):]
        return None


class TcpTransport:
    """Loopback-TCP transport: one listening socket and inbox per endpoint.

    Senders keep a single connection per destination (FIFO per pair comes
    from TCP ordering) and reconnect once on a broken pipe. Discovery and
    address resolution go through the shared registry server.
    """

    def __init__(self, registry_addr: str, host: str = "127.0.0.1"):
        self._registry = _RegistryClient(registry_addr)
        self._host = host
        self._servers: dict[str, socket.socket] = {}
        self._inboxes: dict[str, "queue.Queue[ProtocolMessage]"] = {}
        self._conns: dict[tuple[str, str], socket.socket] = {}
        self._addr_cache: dict[str, str] = {}
        self._lock = threading.Lock()
        self._closed = False

    def register(self, device_id: str) -> Endpoint:
        check_id(device_id, "device_id")
        if device_id in self._servers:
            server = self._servers[device_id]
            return Endpoint(device_id, f"{self._host}:{server.getsockname()[1]}")
        server = socket.create_server((self._host, 0))
        address = f"{self._host}:{server.getsockname()[1]}"
        try:
            reply = self._registry.command(f"REGISTER device_id={device_id} addr={address}")
        except EnergyShareError:
            server.close()
            raise
        if not reply.startswith("OK"):
            server.close()
            raise PeerUnreachable(f"registry refused registration: {reply}")
        self._servers[device_id] = server
        self._inboxes[device_id] = queue.Queue()
        threading.Thread(
            target=self._accept_loop,
            args=(device_id, server),
            name=f"tcp-accept-{device_id}",
            daemon=True,
        ).start()
        return Endpoint(device_id, address)

    def deregister(self, endpoint: Endpoint) -> None:
        self._registry.command(f"DEREGISTER device_id={endpoint.device_id}")
        server = self._servers.pop(endpoint.device_id, None)
        if server is not None:
            server.close()
        self._inboxes.pop(endpoint.device_id, None)

    def close(self) -> None:
        self._closed = True
        for server in self._servers.values():
            server.close()
        with self._lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()
        self._servers.clear()

    def _accept_loop(self, device_id: str, server: socket.socket) -> None:
        while not self._closed:
            try:
                conn, _ = server.accept()
            except OSError:
                return
            threading.Thread(
                target=self._reader,
                args=(device_id, conn),
                name=f"tcp-read-{device_id}",
                daemon=True,
            ).start()

    def _reader(self, device_id: str, conn: socket.socket) -> None:
        try:
            with conn, conn.makefile("r", encoding="utf-8", newline="\n") as stream:
                for raw in stream:
                    line = raw.strip()
                    if not line:
                        continue
                    inbox = self._inboxes.get(device_id)
                    if inbox is None:
                        return
                    inbox.put(decode_message(line))
        except OSError:
            return

    def advertise(self, endpoint: Endpoint, advert: ProviderAdvert) -> None:
        if endpoint.device_id not in self._servers:
            raise PeerUnreachable(f"endpoint {endpoint.device_id!r} is not registered")
        reply = self._registry.command(
            f"ADVERTISE addr={endpoint.address} {encode_advert(advert)}"
        )
        if not reply.startswith("OK"):
            raise PeerUnreachable(f"registry refused advert: {reply}")

    def discover(self, endpoint: Endpoint) -> list[ProviderAdvert]:
        if endpoint.device_id not in self._servers:
            raise PeerUnreachable(f"endpoint {endpoint.device_id!r} is not registered")
        return self._registry.discover()

    def _connect(self, to: str) -> socket.socket:
        address = self._registry.resolve(to)
        if address is None:
            self._addr_cache.pop(to, None)
            raise PeerUnreachable(f"peer {to!r} is not registered")
        self._addr_cache[to] = address
        return socket.create_connection(parse_addr(address), timeout=10.0)

    def send(self, frm: Endpoint, to: str, msg: ProtocolMessage) -> None:
        if frm.device_id not in self._servers:
            raise PeerUnreachable(f"endpoint {frm.device_id!r} is not registered")
        payload = (encode_message(msg) + "\n").encode("utf-8")
        key = (frm.device_id, to)
        with self._lock:
            conn = self._conns.get(key)
            try:
                if conn is None:
                    conn = self._connect(to)
                    self._conns[key] = conn
                conn.sendall(payload)
                return
            except OSError:
                self._conns.pop(key, None)
                if conn is not None:
                    try:
                        conn.close()
                    except OSError:
                        pass
            # one reconnect attempt, then give up
            try:
                conn = self._connect(to)
                conn.sendall(payload)
                self._conns[key] = conn
            except OSError as exc:
                raise PeerUnreachable(f"cannot deliver to {to!r}: {exc}") from exc

    def receive(self, endpoint: Endpoint, timeout: float = 0.0) -> list[ProtocolMessage]:
        """Drain the inbox; optionally block up to ``timeout`` for a first message."""
        inbox = self._inboxes.get(endpoint.device_id)
        if inbox is None:
            raise PeerUnreachable(f"endpoint {endpoint.device_id!r} is not registered")
        messages: list[ProtocolMessage] = []
        try:
            if timeout > 0:
                messages.append(inbox.get(timeout=timeout))
        except queue.Empty:
            return messages
        while True:
            try:
                messages.append(inbox.get_nowait())
            except queue.Empty:
                return messages
