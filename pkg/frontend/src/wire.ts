/**
 * Fixed-layout binary records exchanged between the kernel probe handlers
 * and user-space collectors.  This is the version-1 contract documented in
 * ../../docs/wire-format.md; the Python collector implements the same codec.
 *
 * All integers are little-endian.  Every record has a fixed size keyed by
 * its first byte (the kind tag), so a stream decodes record by record with
 * no length prefixes.  Regions for features disabled at attach time are
 * zero-filled, never omitted: handlers always emit the full layout and
 * decoders map disabled regions to absent fields.
 *
 * Event objects use snake_case keys on purpose — they are exactly the
 * per-line objects of the session JSONL container, so a decoded stream can
 * be written out as a session without any renaming.
 */

export const WIRE_VERSION = 1;

export const KIND_STREAM_HEADER = 0;
export const KIND_DROP_MARKER = 9;

export type EventKind =
  | "token_enter"
  | "token_exit"
  | "graph_enter"
  | "graph_exit"
  | "op_enter"
  | "op_exit"
  | "sched_switch"
  | "sched_wakeup";

export const KIND_CODES: Readonly<Record<EventKind, number>> = {
  token_enter: 1,
  token_exit: 2,
  graph_enter: 3,
  graph_exit: 4,
  op_enter: 5,
  op_exit: 6,
  sched_switch: 7,
  sched_wakeup: 8,
};

const KIND_NAMES = new Map<number, EventKind>(
  (Object.entries(KIND_CODES) as [EventKind, number][]).map(([name, code]) => [code, name]),
);

export const RECORD_SIZES: ReadonlyMap<number, number> = new Map([
  [KIND_STREAM_HEADER, 8],
  [KIND_CODES.token_enter, 28],
  [KIND_CODES.token_exit, 28],
  [KIND_CODES.graph_enter, 40],
  [KIND_CODES.graph_exit, 40],
  [KIND_CODES.op_enter, 312],
  [KIND_CODES.op_exit, 312],
  [KIND_CODES.sched_switch, 40],
  [KIND_CODES.sched_wakeup, 40],
  [KIND_DROP_MARKER, 8],
]);

// flags byte in each record
export const FLAG_PAYLOAD_FAULT = 1 << 0; // tensor struct unreadable; dims/srcs dropped
export const FLAG_NAME_TRUNCATED = 1 << 1;
export const FLAG_PMC_SKIPPED = 1 << 2; // counters not read for this record

// flags byte in the stream header record
export const HDR_FLAG_STR = 1 << 0;
export const HDR_FLAG_PMC = 1 << 1;
export const HDR_FLAG_PERF_BUFFER = 1 << 2;

export type Backend = "CPU" | "OpenCL-GPU" | "NPU";

const BACKEND_CODES: Readonly<Record<Backend, number>> = {
  CPU: 0,
  "OpenCL-GPU": 1,
  NPU: 2,
};
const BACKENDS_BY_CODE: readonly Backend[] = ["CPU", "OpenCL-GPU", "NPU"];

export const OP_TYPE_CODES = {
  NONE: 0,
  ADD: 1,
  MUL: 2,
  MUL_MAT: 3,
  MUL_MAT_ID: 4,
  SOFT_MAX: 5,
  RMS_NORM: 6,
  UNARY: 7,
  ROPE: 8,
  CPY: 9,
  GET_ROWS: 10,
} as const;

export type OpTypeName = keyof typeof OP_TYPE_CODES;

const OP_TYPE_NAMES = new Map<number, OpTypeName>(
  (Object.entries(OP_TYPE_CODES) as [OpTypeName, number][]).map(([name, code]) => [code, name]),
);

// byte offsets within the 312-byte op record, shared with the handler source
export const OP_LAYOUT = {
  op_addr: 24,
  op_type: 32,
  expert_count: 36,
  name: 40,
  dims: 104,
  src_addrs: 136,
  pmc: 216,
  expert_ids: 280,
} as const;

export const NAME_MAX = 63;
export const MAX_SRCS = 10;
export const MAX_PMC_SLOTS = 8;
export const MAX_EXPERT_SLOTS = 8;

export interface TokenPayload {
  batch_size: number;
}

export interface GraphPayload {
  backend_guid: string;
}

export interface SchedPayload {
  prev_tid?: number;
  next_tid?: number;
  prev_state?: number;
  wakee_tid?: number;
}

export interface OpPayload {
  op_addr: string;
  op_type: OpTypeName | number;
  op_name: string;
  backend: Backend;
  dims?: number[];
  src_addrs?: string[];
  pmc?: number[];
  expert_ids?: number[];
}

export type Payload = TokenPayload | GraphPayload | SchedPayload | OpPayload;

export interface TraceEvent {
  kind: EventKind;
  ts_ns: number;
  pid: number;
  tid: number;
  cpu: number;
  seq: number;
  payload: Payload;
}

/**
 * Flag/counter context a stream was recorded under.  Gates how op records
 * are decoded; carried on the wire by the stream header record.
 */
export interface StreamContext {
  str: boolean;
  pmc: boolean;
  perfBuffer: boolean;
  nPmc: number;
}

/** Malformed wire data.  `offset` is the byte position of the bad record. */
export class StreamError extends Error {
  readonly offset: number;

  constructor(message: string, offset: number) {
    super(message);
    this.name = "StreamError";
    this.offset = offset;
  }
}

const utf8Encoder = new TextEncoder();
const utf8Decoder = new TextDecoder("utf-8", { fatal: false });
const asciiDecoder = new TextDecoder("ascii");

function toSafeNumber(value: bigint, what: string): number {
  if (value > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new RangeError(`${what} ${value} does not fit in a JS number`);
  }
  return Number(value);
}

function parseAddr(text: string, what: string): bigint {
  if (!/^0x[0-9a-fA-F]+$/.test(text)) {
    throw new RangeError(`${what} must be a 0x-prefixed hex string, got ${JSON.stringify(text)}`);
  }
  return BigInt(text);
}

function formatAddr(value: bigint): string {
  return "0x" + value.toString(16);
}

function checkContext(ctx: StreamContext): void {
  if (!Number.isInteger(ctx.nPmc) || ctx.nPmc < 0 || ctx.nPmc > MAX_PMC_SLOTS) {
    throw new RangeError(`nPmc must be 0..${MAX_PMC_SLOTS}, got ${ctx.nPmc}`);
  }
}

function isOpKind(kind: EventKind): boolean {
  return kind === "op_enter" || kind === "op_exit";
}

/**
 * Encode one event in the fixed wire layout.
 *
 * The context decides which flag bits get set: an absent field whose
 * feature flag is on is recorded as skipped/faulted so a later decode
 * restores the absence instead of a zero-filled value.
 */
export function encodeEvent(event: TraceEvent, ctx: StreamContext): Uint8Array {
  checkContext(ctx);
  const code = KIND_CODES[event.kind];
  if (code === undefined) {
    throw new RangeError(`unknown event kind ${JSON.stringify(event.kind)}`);
  }
  const size = RECORD_SIZES.get(code)!;
  const out = new Uint8Array(size);
  const view = new DataView(out.buffer);

  let flags = 0;
  let backendCode = 0;
  if (isOpKind(event.kind)) {
    const p = event.payload as OpPayload;
    backendCode = BACKEND_CODES[p.backend];
    if (backendCode === undefined) {
      throw new RangeError(`unknown backend ${JSON.stringify(p.backend)}`);
    }
    if (ctx.str && (p.dims == null || p.src_addrs == null)) {
      flags |= FLAG_PAYLOAD_FAULT;
    }
    if (ctx.pmc && p.backend === "CPU" && p.pmc == null) {
      flags |= FLAG_PMC_SKIPPED;
    }
  }

  out[0] = code;
  out[1] = flags;
  out[2] = backendCode;
  view.setBigUint64(4, BigInt(event.ts_ns), true);
  view.setUint32(12, event.pid, true);
  view.setUint32(16, event.tid, true);
  view.setUint32(20, event.cpu, true);

  switch (event.kind) {
    case "token_enter":
    case "token_exit": {
      const p = event.payload as TokenPayload;
      view.setUint32(24, p.batch_size, true);
      break;
    }
    case "graph_enter":
    case "graph_exit": {
      const p = event.payload as GraphPayload;
      if (p.backend_guid.length !== 16 || !/^[\x00-\x7f]{16}$/.test(p.backend_guid)) {
        throw new RangeError(
          `backend_guid must be 16 hex digits, got ${JSON.stringify(p.backend_guid)}`,
        );
      }
      for (let i = 0; i < 16; i++) {
        out[24 + i] = p.backend_guid.charCodeAt(i);
      }
      break;
    }
    case "sched_switch":
    case "sched_wakeup": {
      const p = event.payload as SchedPayload;
      view.setUint32(24, p.prev_tid ?? 0, true);
      view.setUint32(28, p.next_tid ?? 0, true);
      view.setUint32(32, p.wakee_tid ?? 0, true);
      view.setUint32(36, p.prev_state ?? 0, true);
      break;
    }
    default: {
      const p = event.payload as OpPayload;
      view.setBigUint64(OP_LAYOUT.op_addr, parseAddr(p.op_addr, "op_addr"), true);
      const opCode = typeof p.op_type === "number" ? p.op_type : OP_TYPE_CODES[p.op_type];
      if (opCode === undefined) {
        throw new RangeError(`unknown op_type ${JSON.stringify(p.op_type)}`);
      }
      view.setUint32(OP_LAYOUT.op_type, opCode, true);
      const experts = p.expert_ids ?? [];
      if (experts.length > MAX_EXPERT_SLOTS) {
        throw new RangeError(`at most ${MAX_EXPERT_SLOTS} expert ids fit a record`);
      }
      out[OP_LAYOUT.expert_count] = experts.length;

      let name = utf8Encoder.encode(p.op_name);
      if (name.length > NAME_MAX) {
        name = name.subarray(0, NAME_MAX);
        flags |= FLAG_NAME_TRUNCATED;
        out[1] = flags;
      }
      out.set(name, OP_LAYOUT.name);

      if (p.dims != null) {
        if (p.dims.length !== 4) {
          throw new RangeError(`dims must have 4 entries, got ${p.dims.length}`);
        }
        for (let i = 0; i < 4; i++) {
          view.setBigUint64(OP_LAYOUT.dims + 8 * i, BigInt(p.dims[i]!), true);
        }
      }
      if (p.src_addrs != null) {
        if (p.src_addrs.length > MAX_SRCS) {
          throw new RangeError(`at most ${MAX_SRCS} source addresses fit a record`);
        }
        for (let i = 0; i < p.src_addrs.length; i++) {
          view.setBigUint64(
            OP_LAYOUT.src_addrs + 8 * i,
            parseAddr(p.src_addrs[i]!, `src_addrs[${i}]`),
            true,
          );
        }
      }
      if (p.pmc != null) {
        if (p.pmc.length > MAX_PMC_SLOTS) {
          throw new RangeError(`at most ${MAX_PMC_SLOTS} counter slots fit a record`);
        }
        for (let i = 0; i < p.pmc.length; i++) {
          view.setBigUint64(OP_LAYOUT.pmc + 8 * i, BigInt(p.pmc[i]!), true);
        }
      }
      for (let i = 0; i < experts.length; i++) {
        view.setUint32(OP_LAYOUT.expert_ids + 4 * i, experts[i]!, true);
      }
    }
  }
  return out;
}

/**
 * Decode one record.  The returned event has seq 0; the stream decoder
 * assigns sequence numbers in arrival order.
 */
export function decodeEvent(data: Uint8Array, ctx: StreamContext): TraceEvent {
  checkContext(ctx);
  const code = data[0] ?? -1;
  const kind = KIND_NAMES.get(code);
  if (kind === undefined) {
    throw new StreamError(`unknown record kind ${code}`, 0);
  }
  const expected = RECORD_SIZES.get(code)!;
  if (data.length !== expected) {
    throw new StreamError(`record kind ${code} has ${data.length} bytes, expected ${expected}`, 0);
  }
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  const flags = data[1]!;
  const backendCode = data[2]!;
  const ts = toSafeNumber(view.getBigUint64(4, true), "ts_ns");
  const pid = view.getUint32(12, true);
  const tid = view.getUint32(16, true);
  const cpu = view.getUint32(20, true);

  let payload: Payload;
  switch (kind) {
    case "token_enter":
    case "token_exit":
      payload = { batch_size: view.getUint32(24, true) };
      break;
    case "graph_enter":
    case "graph_exit":
      payload = { backend_guid: asciiDecoder.decode(data.subarray(24, 40)) };
      break;
    case "sched_switch":
      payload = {
        prev_tid: view.getUint32(24, true),
        next_tid: view.getUint32(28, true),
        prev_state: view.getUint32(36, true),
      };
      break;
    case "sched_wakeup":
      payload = { wakee_tid: view.getUint32(32, true) };
      break;
    default: {
      const backend = BACKENDS_BY_CODE[backendCode];
      if (backend === undefined) {
        throw new StreamError(`unknown backend code ${backendCode}`, 0);
      }
      const opCode = view.getUint32(OP_LAYOUT.op_type, true);
      const rawName = data.subarray(OP_LAYOUT.name, OP_LAYOUT.name + 64);
      let nameEnd = 0;
      while (nameEnd < 64 && rawName[nameEnd] !== 0) {
        nameEnd++;
      }
      const op: OpPayload = {
        op_addr: formatAddr(view.getBigUint64(OP_LAYOUT.op_addr, true)),
        op_type: OP_TYPE_NAMES.get(opCode) ?? opCode,
        op_name: utf8Decoder.decode(rawName.subarray(0, nameEnd)),
        backend,
      };
      if (ctx.str && !(flags & FLAG_PAYLOAD_FAULT)) {
        const dims: number[] = [];
        for (let i = 0; i < 4; i++) {
          dims.push(toSafeNumber(view.getBigUint64(OP_LAYOUT.dims + 8 * i, true), "dims"));
        }
        op.dims = dims;
        const srcs: string[] = [];
        for (let i = 0; i < MAX_SRCS; i++) {
          const addr = view.getBigUint64(OP_LAYOUT.src_addrs + 8 * i, true);
          if (addr === 0n) {
            break;
          }
          srcs.push(formatAddr(addr));
        }
        op.src_addrs = srcs;
      }
      if (ctx.pmc && backend === "CPU" && !(flags & FLAG_PMC_SKIPPED)) {
        const pmc: number[] = [];
        for (let i = 0; i < ctx.nPmc; i++) {
          pmc.push(toSafeNumber(view.getBigUint64(OP_LAYOUT.pmc + 8 * i, true), "pmc"));
        }
        op.pmc = pmc;
      }
      const expertCount = data[OP_LAYOUT.expert_count]!;
      if (expertCount > 0) {
        const ids: number[] = [];
        for (let i = 0; i < Math.min(expertCount, MAX_EXPERT_SLOTS); i++) {
          ids.push(view.getUint32(OP_LAYOUT.expert_ids + 4 * i, true));
        }
        op.expert_ids = ids;
      }
      payload = op;
    }
  }
  return { kind, ts_ns: ts, pid, tid, cpu, seq: 0, payload };
}

export function encodeStreamHeader(ctx: StreamContext): Uint8Array {
  checkContext(ctx);
  const out = new Uint8Array(8);
  out[0] = KIND_STREAM_HEADER;
  out[1] = WIRE_VERSION;
  out[2] =
    (ctx.str ? HDR_FLAG_STR : 0) |
    (ctx.pmc ? HDR_FLAG_PMC : 0) |
    (ctx.perfBuffer ? HDR_FLAG_PERF_BUFFER : 0);
  out[3] = ctx.nPmc;
  return out;
}

export function encodeDropMarker(count: number): Uint8Array {
  const out = new Uint8Array(8);
  out[0] = KIND_DROP_MARKER;
  new DataView(out.buffer).setUint32(4, count, true);
  return out;
}

/** Serialize events as a self-describing wire stream (header record first). */
export function encodeStream(events: readonly TraceEvent[], ctx: StreamContext): Uint8Array {
  const chunks = [encodeStreamHeader(ctx), ...events.map((e) => encodeEvent(e, ctx))];
  const total = chunks.reduce((n, c) => n + c.length, 0);
  const out = new Uint8Array(total);
  let pos = 0;
  for (const chunk of chunks) {
    out.set(chunk, pos);
    pos += chunk.length;
  }
  return out;
}

export interface DecodedStream {
  version: number;
  ctx: StreamContext;
  events: TraceEvent[];
  dropped: number;
  /** seqs of records whose name was cut to the 63-byte wire limit */
  truncatedNames: number[];
}

/**
 * Decode a recorded wire stream into events with consumer-assigned seqs.
 *
 * Sequence numbers count every record the probes emitted: a drop marker
 * advances the counter by its lost count, so losses stay visible as seq
 * gaps downstream.
 */
export function decodeStream(data: Uint8Array): DecodedStream {
  if (data.length < 8 || data[0] !== KIND_STREAM_HEADER) {
    throw new StreamError("stream does not start with a header record", 0);
  }
  const version = data[1]!;
  if (version !== WIRE_VERSION) {
    throw new StreamError(`unsupported wire version ${version}`, 0);
  }
  const bits = data[2]!;
  const nPmc = data[3]!;
  if (nPmc > MAX_PMC_SLOTS) {
    throw new StreamError(`header claims ${nPmc} counter slots, max ${MAX_PMC_SLOTS}`, 0);
  }
  const ctx: StreamContext = {
    str: (bits & HDR_FLAG_STR) !== 0,
    pmc: (bits & HDR_FLAG_PMC) !== 0,
    perfBuffer: (bits & HDR_FLAG_PERF_BUFFER) !== 0,
    nPmc,
  };
  const out: DecodedStream = { version, ctx, events: [], dropped: 0, truncatedNames: [] };
  let pos = 8;
  let seq = 0;
  while (pos < data.length) {
    const code = data[pos]!;
    const size = RECORD_SIZES.get(code);
    if (size === undefined) {
      throw new StreamError(`unknown record kind ${code}`, pos);
    }
    const body = data.subarray(pos, pos + size);
    if (body.length < size) {
      throw new StreamError(`record kind ${code} truncated to ${body.length} bytes`, pos);
    }
    if (code === KIND_STREAM_HEADER) {
      throw new StreamError("header record in the middle of a stream", pos);
    }
    if (code === KIND_DROP_MARKER) {
      const count = new DataView(body.buffer, body.byteOffset).getUint32(4, true);
      out.dropped += count;
      seq += count;
    } else {
      const event = decodeEvent(body, ctx);
      event.seq = seq;
      if (body[1]! & FLAG_NAME_TRUNCATED) {
        out.truncatedNames.push(seq);
      }
      out.events.push(event);
      seq += 1;
    }
    pos += size;
  }
  return out;
}
