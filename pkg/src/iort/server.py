"""Network runtime for the broker: TCP stream endpoint plus HTTP gateway.

The TCP endpoint speaks newline-delimited JSON envelopes. Robots register
and are then fed their command queue one record at a time; their ack
envelopes complete both the application round trip (route_ack) and the
queue-level lease. Operators register to send commands and to receive
their queued acks; `subscribe` envelopes attach push topics.

The HTTP gateway exposes the console surface: `GET /arms`,
`POST /arms/{id}/commands`, `GET /arms/{id}/patterns`, and a WebSocket at
`/ws?client=<id>&topics=<csv>` that pushes notification and prompt
envelopes as JSON text frames and accepts `pattern_response` frames.

Everything runs on one asyncio loop; core calls are synchronous and fast,
and all pushes go through non-blocking per-connection queues.
"""

from __future__ import annotations

import asyncio
import logging

import uvicorn
from fastapi import FastAPI, Query, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from .broker import (
    BrokerCore,
    BrokerError,
    ConflictError,
    LeaseError,
    NotFoundError,
    Session,
    ValidationRejected,
    ack_queue,
    cmd_queue,
)
from .protocol import (
    Envelope,
    Notification,
    ProtocolError,
    SchemaError,
    decode,
    encode,
)
from .protocol import _decode_command  # gateway accepts bare command bodies

logger = logging.getLogger(__name__)

_PUSH_QUEUE_LIMIT = 1000


class _QueueTransport:
    """Non-blocking push transport; a writer task drains the queue.

    `send` may be called from the serving loop or from a foreign thread
    (the core is synchronous); cross-thread sends are marshalled onto the
    owning loop. Overflow drops the envelope: push is best-effort.
    """

    def __init__(self) -> None:
        self.queue: asyncio.Queue[Envelope | None] = asyncio.Queue(_PUSH_QUEUE_LIMIT)
        self._loop = asyncio.get_running_loop()

    def _put(self, item: Envelope | None) -> bool:
        try:
            self.queue.put_nowait(item)
            return True
        except asyncio.QueueFull:
            logger.warning("push queue full; dropping envelope")
            return False

    def send(self, env: Envelope) -> bool:
        try:
            running = asyncio.get_running_loop()
        except RuntimeError:
            running = None
        if running is self._loop:
            return self._put(env)
        self._loop.call_soon_threadsafe(self._put, env)
        return True

    def close(self) -> None:
        try:
            running = asyncio.get_running_loop()
        except RuntimeError:
            running = None
        if running is self._loop:
            self._put(None)
        else:
            self._loop.call_soon_threadsafe(self._put, None)


class BrokerServer:
    def __init__(
        self,
        core: BrokerCore,
        *,
        host: str = "127.0.0.1",
        tcp_port: int = 7450,
        http_port: int = 7451,
        tick_interval_s: float = 1.0,
    ) -> None:
        self.core = core
        self.host = host
        self.tcp_port = tcp_port
        self.http_port = http_port
        self.tick_interval_s = tick_interval_s
        self._wake = asyncio.Event()
        self._tasks: list[asyncio.Task] = []
        self._tcp_server: asyncio.AbstractServer | None = None
        self._uvicorn: uvicorn.Server | None = None
        self._uvicorn_task: asyncio.Task | None = None
        # arm_id -> (record_id, command_id, lease expiry) currently pushed
        self._in_flight: dict[str, tuple[int, str, int]] = {}

    def poke(self) -> None:
        self._wake.set()

    # -- lifecycle -----------------------------------------------------------

    async def start(self) -> None:
        self._tcp_server = await asyncio.start_server(
            self._handle_tcp, self.host, self.tcp_port
        )
        config = uvicorn.Config(
            build_gateway(self.core, self),
            host=self.host,
            port=self.http_port,
            log_level="warning",
            ws="auto",
        )
        self._uvicorn = uvicorn.Server(config)
        self._uvicorn.install_signal_handlers = lambda: None  # embedded
        self._uvicorn_task = asyncio.create_task(self._uvicorn.serve())
        self._tasks.append(asyncio.create_task(self._tick_loop()))
        self._tasks.append(asyncio.create_task(self._pump_loop()))
        logger.info(
            "broker listening on tcp %s:%d, http %s:%d",
            self.host, self.tcp_port, self.host, self.http_port,
        )

    async def stop(self) -> None:
        if self._tcp_server is not None:
            self._tcp_server.close()
            await self._tcp_server.wait_closed()
        if self._uvicorn is not None:
            self._uvicorn.should_exit = True
            await self._uvicorn_task  # graceful lifespan shutdown
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self.core.close()

    async def serve_forever(self) -> None:
        await self.start()
        await asyncio.gather(self._uvicorn_task, *self._tasks)

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(self.tick_interval_s)
            self.core.tick()
            self.poke()

    # -- delivery pump ---------------------------------------------------------

    async def _pump_loop(self) -> None:
        while True:
            await self._wake.wait()
            self._wake.clear()
            try:
                self._pump_once()
            except Exception:
                logger.exception("delivery pump failed")

    def _pump_once(self) -> None:
        for arm_id in list(self.core.arms()):
            self._pump_commands(arm_id)
            self._pump_acks(arm_id)

    def _pump_commands(self, arm_id: str) -> None:
        session = self.core.robot_session(arm_id)
        if session is None or not session.alive:
            return
        in_flight = self._in_flight.get(arm_id)
        now = self.core.clock.now_ms()
        if in_flight is not None and now < in_flight[2]:
            return
        self._in_flight.pop(arm_id, None)
        delivery = self.core.next(cmd_queue(arm_id), self._consumer(session))
        if delivery is None:
            return
        cmd = delivery.envelope.body
        expiry = now + self.core.lease_ms
        self._in_flight[arm_id] = (delivery.record_id, cmd.id, expiry)
        if not session.push(delivery.envelope):
            logger.warning("arm %s: push failed; command will redeliver", arm_id)

    def _pump_acks(self, arm_id: str) -> None:
        queue_name = ack_queue(arm_id)
        while True:
            head = self.core.peek_ready(queue_name)
            if head is None:
                return
            operator_id = self.core.command_operator(head.body.command_id)
            if operator_id is not None:
                sessions = self.core.operator_sessions(operator_id)
            else:
                # Mapping lost across a restart; any live operator will do.
                sessions = self.core.live_operator_sessions()
            sessions = [s for s in sessions if s.transport is not None]
            if not sessions:
                # FIFO pause: the recipient is offline; their acks wait.
                return
            delivery = self.core.next(queue_name, f"ack-pump-{arm_id}")
            if delivery is None:
                return
            sessions[0].push(delivery.envelope)
            try:
                self.core.ack_record(queue_name, f"ack-pump-{arm_id}", delivery.record_id)
            except LeaseError:
                return

    def _consumer(self, session: Session) -> str:
        return f"tcp-robot-{session.session_id}"

    # -- TCP protocol ------------------------------------------------------------

    async def _handle_tcp(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        transport = _QueueTransport()
        session: Session | None = None
        sender = asyncio.create_task(self._sender(transport, writer))
        last_seq: int | None = None
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                try:
                    env = decode(line)
                except ProtocolError as exc:
                    transport.send(self._error_env(str(exc)))
                    continue
                if last_seq is not None and env.seq <= last_seq:
                    transport.send(self._error_env(
                        f"seq {env.seq} is not strictly increasing (last {last_seq})"
                    ))
                    continue
                last_seq = env.seq
                if session is None:
                    if env.type != "register":
                        transport.send(self._error_env("first envelope must be register"))
                        continue
                    try:
                        session = self.core.register(
                            env.body.kind, env.body.id,
                            profile=env.body.profile, transport=transport,
                        )
                    except (ConflictError, ValueError) as exc:
                        transport.send(self._error_env(str(exc)))
                        break
                    transport.send(self._notification_env(
                        "session", {"registered": env.body.id, "kind": env.body.kind},
                    ))
                    self.poke()
                    continue
                self._dispatch(session, transport, env)
        except (ConnectionResetError, asyncio.IncompleteReadError):
            pass
        finally:
            if session is not None:
                self.core.unregister(session)
                if session.kind == "robot":
                    self._in_flight.pop(session.client_id, None)
            transport.close()
            await sender
            writer.close()
            logger.info("connection %s closed", peer)

    def _dispatch(self, session: Session, transport: _QueueTransport, env: Envelope) -> None:
        try:
            if env.type == "command" and session.kind == "operator":
                receipt = self.core.submit_command(env, f"tcp-{session.session_id}")
                transport.send(self._notification_env("receipt", {
                    "command_id": env.body.id,
                    "record_id": receipt.record_id,
                    "position": receipt.position,
                }))
            elif env.type == "ack" and session.kind == "robot":
                self._robot_ack(session, env)
            elif env.type == "notification" and env.body.topic == "command.done":
                self._robot_done(session, env.body.event.get("command_id"))
            elif env.type == "notification" and env.body.topic == "sequence.end":
                self.core.end_sequence(env.body.event["arm_id"], session.client_id)
            elif env.type == "subscribe":
                self.core.subscribe(session, env.body.topics)
            elif env.type == "pattern_response":
                self.core.respond_prompt(session, env.body.pattern_id, env.body.accepted)
            else:
                transport.send(self._error_env(
                    f"envelope type {env.type!r} not expected from a {session.kind}"
                ))
                return
        except ValidationRejected as exc:
            transport.send(self._error_env(
                str(exc), violations=[{"field": v.field, "message": v.message}
                                      for v in exc.violations],
            ))
        except BrokerError as exc:
            transport.send(self._error_env(str(exc)))
        self.poke()

    def _robot_ack(self, session: Session, env: Envelope) -> None:
        arm_id = session.client_id
        ack = env.body
        self.core.route_ack(arm_id, ack)
        in_flight = self._in_flight.get(arm_id)
        if in_flight is not None and in_flight[1] == ack.command_id:
            self._complete_record(session, arm_id, in_flight[0])

    def _robot_done(self, session: Session, command_id: str | None) -> None:
        arm_id = session.client_id
        in_flight = self._in_flight.get(arm_id)
        if command_id is not None and in_flight is not None and in_flight[1] == command_id:
            self._complete_record(session, arm_id, in_flight[0])

    def _complete_record(self, session: Session, arm_id: str, record_id: int) -> None:
        try:
            self.core.ack_record(cmd_queue(arm_id), self._consumer(session), record_id)
        except LeaseError as exc:
            logger.info("arm %s: %s", arm_id, exc)
        self._in_flight.pop(arm_id, None)

    async def _sender(self, transport: _QueueTransport, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                env = await transport.queue.get()
                if env is None:
                    return
                writer.write(encode(env))
                await writer.drain()
        except (ConnectionResetError, RuntimeError):
            pass

    def _error_env(self, message: str, violations: list | None = None) -> Envelope:
        event: dict = {"message": message}
        if violations:
            event["violations"] = violations
        return Envelope(type="notification", body=Notification(topic="error", event=event))

    def _notification_env(self, topic: str, event: dict) -> Envelope:
        return Envelope(type="notification", body=Notification(topic=topic, event=event))


# -- HTTP gateway ----------------------------------------------------------------


def build_gateway(core: BrokerCore, server: BrokerServer | None = None) -> FastAPI:
    app = FastAPI(title="arm broker gateway")

    def poke() -> None:
        if server is not None:
            server.poke()

    @app.get("/arms")
    def list_arms() -> dict:
        arms = []
        for arm_id, info in sorted(core.arms().items()):
            pose = info.last_pose
            arms.append({
                "arm_id": arm_id,
                "live": core.robot_session(arm_id) is not None,
                "profile": info.profile,
                "last_pose": None if pose is None else {
                    "x_cm": pose.x_cm, "y_cm": pose.y_cm, "z_cm": pose.z_cm,
                    "roll_deg": pose.roll_deg, "gripper_mm": pose.gripper_mm,
                },
            })
        return {"arms": arms}

    @app.post("/arms/{arm_id}/commands")
    async def post_command(arm_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse(status_code=400, content={"error": "body must be JSON"})
        try:
            cmd = _decode_command(body)
        except SchemaError as exc:
            return JSONResponse(status_code=422, content={
                "violations": [{"field": exc.field, "message": str(exc)}],
            })
        if cmd.arm_id != arm_id:
            return JSONResponse(status_code=422, content={
                "violations": [{"field": "arm_id",
                                "message": f"path says {arm_id!r}, body says {cmd.arm_id!r}"}],
            })
        env = Envelope(type="command", body=cmd)
        try:
            receipt = core.submit_command(env, f"http-{cmd.operator_id}")
        except ValidationRejected as exc:
            return JSONResponse(status_code=422, content={
                "violations": [{"field": v.field, "message": v.message}
                               for v in exc.violations],
            })
        except NotFoundError as exc:
            return JSONResponse(status_code=404, content={"error": str(exc)})
        except ConflictError as exc:
            return JSONResponse(status_code=409, content={"error": str(exc)})
        poke()
        return {"record_id": receipt.record_id, "position": receipt.position,
                "command_id": cmd.id}

    @app.get("/arms/{arm_id}/patterns")
    def list_patterns(arm_id: str) -> dict:
        return {"patterns": core.store.patterns_doc(arm_id)}

    @app.websocket("/ws")
    async def websocket_endpoint(
        websocket: WebSocket,
        client: str = Query(...),
        topics: str = Query(""),
    ) -> None:
        await websocket.accept()
        transport = _QueueTransport()
        try:
            session = core.register("operator", client, transport=transport)
        except (ConflictError, ValueError) as exc:
            await websocket.send_text(
                encode(Envelope(type="notification",
                                body=Notification(topic="error",
                                                  event={"message": str(exc)}))).decode()
            )
            await websocket.close()
            return
        topic_list = [t for t in topics.split(",") if t]
        if topic_list:
            core.subscribe(session, topic_list)
        poke()

        async def pusher() -> None:
            while True:
                env = await transport.queue.get()
                if env is None:
                    return
                await websocket.send_text(encode(env).decode())

        push_task = asyncio.create_task(pusher())
        last_seq: int | None = None
        try:
            while True:
                text = await websocket.receive_text()
                try:
                    env = decode(text)
                except ProtocolError as exc:
                    transport.send(Envelope(
                        type="notification",
                        body=Notification(topic="error", event={"message": str(exc)}),
                    ))
                    continue
                if last_seq is not None and env.seq <= last_seq:
                    transport.send(Envelope(
                        type="notification",
                        body=Notification(topic="error", event={
                            "message": f"seq {env.seq} is not strictly increasing (last {last_seq})",
                        }),
                    ))
                    continue
                last_seq = env.seq
                try:
                    if env.type == "pattern_response":
                        core.respond_prompt(session, env.body.pattern_id, env.body.accepted)
                    elif env.type == "subscribe":
                        core.subscribe(session, env.body.topics)
                    elif env.type == "notification" and env.body.topic == "sequence.end":
                        core.end_sequence(env.body.event["arm_id"], session.client_id)
                    else:
                        transport.send(Envelope(
                            type="notification",
                            body=Notification(topic="error", event={
                                "message": f"unexpected frame type {env.type!r}"}),
                        ))
                except BrokerError as exc:
                    transport.send(Envelope(
                        type="notification",
                        body=Notification(topic="error", event={"message": str(exc)}),
                    ))
                poke()
        except WebSocketDisconnect:
            pass
        finally:
            core.unregister(session)
            transport.close()
            await push_task

    return app
