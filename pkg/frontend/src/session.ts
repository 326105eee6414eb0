/**
 * Schema and parser for the session JSONL container: line 1 is
 * `{"profinfer_header": {...}, "v": 1}`, every further line one trace
 * event.  The event shape is identical to wire.ts's TraceEvent, so a
 * parsed session feeds straight into the codec.
 */

import { z } from "zod";

import type { StreamContext, TraceEvent } from "./wire.js";
import { MAX_EXPERT_SLOTS, MAX_PMC_SLOTS, MAX_SRCS, OP_TYPE_CODES } from "./wire.js";

const hexAddr = z.string().regex(/^0x[0-9a-f]+$/, "0x-prefixed lowercase hex");
const guid = z.string().regex(/^[0-9a-f]{16}$/, "16 lowercase hex digits");
const u32 = z.number().int().nonnegative();
const u64 = z.number().int().nonnegative(); // 2**53-1 in practice: JSON numbers

export const PmcSpecSchema = z
  .object({
    name: z.string().min(1),
    scope: z.enum(["core", "software", "hardware"]),
    unit: z.string().min(1),
    unit_scale: z.number().int().positive(),
  })
  .strict();

export const SessionHeaderSchema = z
  .object({
    pid: u32,
    nthreads: z.number().int().positive(),
    flags: z
      .object({ str: z.boolean(), pmc: z.boolean(), perf_buffer: z.boolean() })
      .strict(),
    pmc_specs: z.array(PmcSpecSchema).max(MAX_PMC_SLOTS),
    inference_tids: z.array(u32).min(1),
    qos_target_tps: z.number().positive().nullable(),
    backend_names: z.record(guid, z.string()),
    dropped: u32,
    moe: z
      .object({
        total_experts: z.number().int().positive(),
        experts_per_token: z.number().int().positive(),
      })
      .strict()
      .optional(),
  })
  .strict();

export const HeaderLineSchema = z
  .object({ profinfer_header: SessionHeaderSchema, v: z.literal(1) })
  .strict();

const TokenPayloadSchema = z.object({ batch_size: u32 }).strict();
const GraphPayloadSchema = z.object({ backend_guid: guid }).strict();
const SchedPayloadSchema = z
  .object({
    prev_tid: u32.optional(),
    next_tid: u32.optional(),
    prev_state: u32.optional(),
    wakee_tid: u32.optional(),
  })
  .strict();
const OpPayloadSchema = z
  .object({
    op_addr: hexAddr,
    op_type: z.union([
      z.enum(Object.keys(OP_TYPE_CODES) as [string, ...string[]]),
      u32, // codes this build does not know survive as numbers
    ]),
    op_name: z.string(),
    backend: z.enum(["CPU", "OpenCL-GPU", "NPU"]),
    dims: z.array(u64).length(4).optional(),
    src_addrs: z.array(hexAddr).max(MAX_SRCS).optional(),
    pmc: z.array(u64).max(MAX_PMC_SLOTS).optional(),
    expert_ids: z.array(u32).max(MAX_EXPERT_SLOTS).optional(),
  })
  .strict();

function eventLine<K extends string, P extends z.ZodTypeAny>(kind: K, payload: P) {
  return z
    .object({
      kind: z.literal(kind),
      ts_ns: u64,
      pid: u32,
      tid: u32,
      cpu: u32,
      seq: u32,
      payload,
    })
    .strict();
}

export const EventLineSchema = z.discriminatedUnion("kind", [
  eventLine("token_enter", TokenPayloadSchema),
  eventLine("token_exit", TokenPayloadSchema),
  eventLine("graph_enter", GraphPayloadSchema),
  eventLine("graph_exit", GraphPayloadSchema),
  eventLine("op_enter", OpPayloadSchema),
  eventLine("op_exit", OpPayloadSchema),
  eventLine("sched_switch", SchedPayloadSchema),
  eventLine("sched_wakeup", SchedPayloadSchema),
]);

export type SessionHeader = z.infer<typeof SessionHeaderSchema>;
export type EventLine = z.infer<typeof EventLineSchema>;

export interface Session {
  header: SessionHeader;
  events: TraceEvent[];
}

/** The wire-decode context a session's op events were captured under. */
export function contextOf(header: SessionHeader): StreamContext {
  return {
    str: header.flags.str,
    pmc: header.flags.pmc,
    perfBuffer: header.flags.perf_buffer,
    nPmc: header.pmc_specs.length,
  };
}

/**
 * Parse a session from JSONL text.
 *
 * Throws an Error naming the offending line (1-based) on malformed JSON
 * or schema violations.
 */
export function parseSessionJsonl(text: string): Session {
  const lines = text.split("\n");
  while (lines.length > 0 && lines[lines.length - 1] === "") {
    lines.pop();
  }
  if (lines.length === 0) {
    throw new Error("empty session file");
  }
  const parse = (line: string, lineno: number): unknown => {
    try {
      return JSON.parse(line);
    } catch (err) {
      throw new Error(`line ${lineno}: not valid JSON (${(err as Error).message})`);
    }
  };
  const head = HeaderLineSchema.safeParse(parse(lines[0]!, 1));
  if (!head.success) {
    throw new Error(`line 1: bad session header: ${head.error.issues[0]?.message}`);
  }
  const events: TraceEvent[] = [];
  for (let i = 1; i < lines.length; i++) {
    const checked = EventLineSchema.safeParse(parse(lines[i]!, i + 1));
    if (!checked.success) {
      const issue = checked.error.issues[0];
      throw new Error(
        `line ${i + 1}: bad event${issue ? ` at ${issue.path.join(".")}: ${issue.message}` : ""}`,
      );
    }
    events.push(checked.data as TraceEvent);
  }
  return { header: head.data.profinfer_header, events };
}
