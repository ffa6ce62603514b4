"""Client for a street-view style static image API.

Requests are canonicalised into URLs with alphabetically ordered parameters.
:class:`Fetcher` adds a disk cache keyed by a digest of the URL without the
API key, a minimum-interval rate limiter, and exponential-backoff retries on
server errors and timeouts. The HTTP transport and the clock are injected, so
the whole module runs offline in tests.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence
from urllib.parse import quote

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://maps.googleapis.com/maps/api/streetview"
API_KEY_ENV = "RDD_STREETVIEW_KEY"
MAX_SIDE = 640
EARTH_RADIUS_M = 6_371_008.8
_RATE_GUARD = 1e-9


class RequestError(ValueError):
    pass


@dataclass(frozen=True)
class ViewRequest:
    location: tuple[float, float] | None = None
    pano_id: str | None = None
    size: tuple[int, int] = (MAX_SIDE, MAX_SIDE)
    heading: float = 0.0
    pitch: float = 0.0
    fov: float = 90.0
    api_key: str = field(default="", repr=False)

    def __post_init__(self):
        if (self.location is None) == (self.pano_id is None):
            raise RequestError("exactly one of location and pano_id must be set")
        if self.location is not None:
            lat, lng = self.location
            if not (-90 <= lat <= 90 and -180 <= lng <= 180):
                raise RequestError(f"invalid coordinates {self.location}")
        w, h = (int(v) for v in self.size)
        if w < 1 or h < 1:
            raise RequestError(f"invalid size {self.size}")
        object.__setattr__(self, "size", (min(w, MAX_SIDE), min(h, MAX_SIDE)))
        object.__setattr__(self, "heading", float(self.heading) % 360.0)
        if not -90 <= self.pitch <= 90:
            raise RequestError(f"pitch {self.pitch} outside [-90, 90]")
        if not 0 < self.fov <= 120:
            raise RequestError(f"fov {self.fov} outside (0, 120]")

    def params(self, with_key: bool = True) -> dict[str, str]:
        p = {
            "fov": f"{self.fov:.6f}",
            "heading": f"{self.heading:.6f}",
            "pitch": f"{self.pitch:.6f}",
            "size": f"{self.size[0]}x{self.size[1]}",
        }
        if self.location is not None:
            p["location"] = f"{self.location[0]:.6f},{self.location[1]:.6f}"
        else:
            p["pano"] = quote(self.pano_id, safe="")
        if with_key:
            p["key"] = quote(self.api_key, safe="")
        return p


def build_url(req: ViewRequest, endpoint_base: str = DEFAULT_ENDPOINT, with_key: bool = True) -> str:
    params = req.params(with_key)
    return endpoint_base + "?" + "&".join(f"{k}={params[k]}" for k in sorted(params))


def request_hash(req: ViewRequest, endpoint_base: str = DEFAULT_ENDPOINT) -> str:
    return hashlib.sha256(build_url(req, endpoint_base, with_key=False).encode()).hexdigest()[:32]


# ---------------------------------------------------------------------------
# transport and time

@dataclass
class Response:
    status: int
    content: bytes = b""
    headers: dict = field(default_factory=dict)


class Transport(Protocol):
    def __call__(self, url: str, timeout: float) -> Response: ...


class TransportTimeout(Exception):
    pass


def requests_transport(url: str, timeout: float) -> Response:
    import requests

    try:
        r = requests.get(url, timeout=timeout)
    except requests.Timeout as exc:
        raise TransportTimeout(str(exc)) from None
    return Response(r.status_code, r.content, dict(r.headers))


class Clock(Protocol):
    def now(self) -> float: ...
    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Clock that advances only when slept on."""

    def __init__(self, start: float = 0.0):
        self.t = start
        self.sleeps: list[float] = []
        self._lock = threading.Lock()

    def now(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self.sleeps.append(seconds)
            if seconds > 0:
                self.t += seconds


class RateLimiter:
    """Allow at most one call per ``1 / rate`` seconds.

    While busy, calls are placed on the grid ``origin + k * step`` rather than
    chained intervals, so rounding does not accumulate. ``step`` exceeds
    ``1 / rate`` by a nanosecond so float rounding can never squeeze an extra
    call into a one-second window.
    """

    def __init__(self, rate: float, clock: Clock):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self._step = self.interval + _RATE_GUARD
        self.clock = clock
        self._origin: float | None = None
        self._k = 0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock.now()
            if self._origin is not None:
                slot = self._origin + (self._k + 1) * self._step
                if now < slot:
                    self.clock.sleep(slot - now)
                    self._k += 1
                    return
            self._origin, self._k = now, 0


# ---------------------------------------------------------------------------
# fetching

@dataclass(frozen=True)
class FetchPolicy:
    max_requests_per_second: float = 10.0
    max_retries: int = 3
    backoff_base: float = 0.5
    cache_dir: Path | None = None
    timeout: float = 30.0
    endpoint_base: str = DEFAULT_ENDPOINT

    def __post_init__(self):
        if not self.max_requests_per_second > 0:
            raise ValueError("max_requests_per_second must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class FetchRecord:
    hash: str
    status: str  # fetched | cached | failed
    capture_date: str | None = None
    bytes: bytes = b""
    error: str | None = None
    attempts: int = 0

    def summary(self) -> dict:
        return {"hash": self.hash, "status": self.status, "capture_date": self.capture_date,
                "n_bytes": len(self.bytes), "error": self.error, "attempts": self.attempts}


def _capture_date(headers: dict) -> str | None:
    for k, v in headers.items():
        if k.lower() in ("x-capture-date", "capture-date"):
            return str(v)
    return None


class Fetcher:
    """Rate-limited, retrying, caching fetcher.

    Concurrent calls for the same request share one network call.
    """

    def __init__(self, policy: FetchPolicy, transport: Transport = requests_transport, clock: Clock | None = None):
        self.policy = policy
        self.transport = transport
        self.clock = clock or SystemClock()
        self.limiter = RateLimiter(policy.max_requests_per_second, self.clock)
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Event] = {}
        self._results: dict[str, FetchRecord] = {}

    # cache layout: <hash>.img and <hash>.meta.json
    def _paths(self, h: str) -> tuple[Path, Path] | None:
        if self.policy.cache_dir is None:
            return None
        d = Path(self.policy.cache_dir)
        return d / f"{h}.img", d / f"{h}.meta.json"

    def _cached(self, h: str) -> FetchRecord | None:
        paths = self._paths(h)
        if paths and paths[0].exists() and paths[1].exists():
            meta = json.loads(paths[1].read_text())
            return FetchRecord(h, "cached", meta.get("capture_date"), paths[0].read_bytes())
        with self._lock:
            rec = self._results.get(h)
        if rec is not None and rec.status != "failed":
            return FetchRecord(h, "cached", rec.capture_date, rec.bytes)
        return None

    def _store(self, h: str, req: ViewRequest, rec: FetchRecord) -> None:
        with self._lock:
            self._results[h] = rec
            paths = self._paths(h)
            if paths is None:
                return
            paths[0].parent.mkdir(parents=True, exist_ok=True)
            meta = {
                "hash": h,
                "url": build_url(req, self.policy.endpoint_base, with_key=False),
                "capture_date": rec.capture_date,
                "n_bytes": len(rec.bytes),
            }
            tmp = paths[0].with_suffix(".img.tmp")
            tmp.write_bytes(rec.bytes)
            tmp.replace(paths[0])
            paths[1].write_text(json.dumps(meta, indent=1))

    def fetch(self, req: ViewRequest) -> FetchRecord:
        h = request_hash(req, self.policy.endpoint_base)
        while True:
            hit = self._cached(h)
            if hit is not None:
                return hit
            with self._lock:
                event = self._inflight.get(h)
                if event is None:
                    event = self._inflight[h] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                with self._lock:
                    rec = self._results.get(h)
                if rec is not None and rec.status == "failed":
                    return rec
                continue
            try:
                rec = self._download(h, req)
                if rec.status == "fetched":
                    self._store(h, req, rec)
                else:
                    with self._lock:
                        self._results[h] = rec
                return rec
            finally:
                with self._lock:
                    del self._inflight[h]
                event.set()

    def _download(self, h: str, req: ViewRequest) -> FetchRecord:
        url = build_url(req, self.policy.endpoint_base)
        last_error = None
        attempts = 0
        for attempt in range(self.policy.max_retries + 1):
            if attempt:
                self.clock.sleep(self.policy.backoff_base * 2 ** (attempt - 1))
            self.limiter.acquire()
            attempts += 1
            try:
                resp = self.transport(url, self.policy.timeout)
            except (TransportTimeout, TimeoutError) as exc:
                last_error = f"timeout: {exc}"
                log.warning("request %s timed out (attempt %d)", h, attempts)
                continue
            if 200 <= resp.status < 300:
                return FetchRecord(h, "fetched", _capture_date(resp.headers), resp.content, attempts=attempts)
            last_error = f"HTTP {resp.status}"
            if 400 <= resp.status < 500:
                log.warning("request %s rejected with HTTP %d", h, resp.status)
                break
            log.warning("request %s got HTTP %d (attempt %d)", h, resp.status, attempts)
        return FetchRecord(h, "failed", error=last_error, attempts=attempts)

    def fetch_many(self, reqs: Sequence[ViewRequest], jobs: int = 1) -> list[FetchRecord]:
        if jobs <= 1:
            return [self.fetch(r) for r in reqs]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(self.fetch, reqs))


def fetch(req: ViewRequest, policy: FetchPolicy, transport: Transport = requests_transport,
          clock: Clock | None = None) -> FetchRecord:
    return Fetcher(policy, transport, clock).fetch(req)


# ---------------------------------------------------------------------------
# routes

def _to_xy(points: Sequence[tuple[float, float]]) -> tuple[list[tuple[float, float]], float, float]:
    lat0 = math.radians(sum(p[0] for p in points) / len(points))
    lng0 = points[0][1]
    k = math.cos(lat0)
    xy = [(math.radians(lng - lng0) * k * EARTH_RADIUS_M, math.radians(lat) * EARTH_RADIUS_M) for lat, lng in points]
    return xy, k, lng0


def _from_xy(x: float, y: float, k: float, lng0: float) -> tuple[float, float]:
    return math.degrees(y / EARTH_RADIUS_M), lng0 + math.degrees(x / (k * EARTH_RADIUS_M))


def resample_polyline(polyline: Sequence[tuple[float, float]], spacing_m: float) -> list[tuple[float, float]]:
    """Points every ``spacing_m`` metres of arc length, starting at the first
    vertex (equirectangular approximation)."""
    if len(polyline) < 2:
        raise ValueError("a route needs at least two points")
    if not spacing_m > 0:
        raise ValueError("spacing must be positive")
    xy, k, lng0 = _to_xy(polyline)
    seg = [math.dist(a, b) for a, b in zip(xy, xy[1:])]
    total = sum(seg)
    if total == 0:
        raise ValueError("degenerate route: all points coincide")
    n = int(math.floor(total / spacing_m + 1e-9))
    out = []
    i, start = 0, 0.0
    for step in range(n + 1):
        s = min(step * spacing_m, total)
        while i < len(seg) - 1 and s > start + seg[i]:
            start += seg[i]
            i += 1
        t = 0.0 if seg[i] == 0 else (s - start) / seg[i]
        t = min(max(t, 0.0), 1.0)
        (x0, y0), (x1, y1) = xy[i], xy[i + 1]
        out.append(_from_xy(x0 + t * (x1 - x0), y0 + t * (y1 - y0), k, lng0))
    return out


def sample_route(
    polyline: Sequence[tuple[float, float]], spacing_m: float, headings: Sequence[float],
    api_key: str = "", **view_kwargs,
) -> list[ViewRequest]:
    """One request per (resampled point, heading)."""
    return [
        ViewRequest(location=pt, heading=hd, api_key=api_key, **view_kwargs)
        for pt in resample_polyline(polyline, spacing_m)
        for hd in headings
    ]


def load_route(path) -> list[tuple[float, float]]:
    data = json.loads(Path(path).read_text())
    try:
        return [(float(lat), float(lng)) for lat, lng in data]
    except (TypeError, ValueError):
        raise ValueError(f"{path}: expected a JSON list of [lat, lng] pairs") from None
