/**
 * The kernel-side half of the profiler: BPF probe handler source plus the
 * tables user space needs to load it (attachment points, control-map and
 * tensor-offset-map indices, counter slot order).
 *
 * The C program targets the BCC toolchain.  It is shipped as source
 * because BCC compiles against the running kernel's headers at load time;
 * the collector rewrites the `PATCHED at load time` defines for the target
 * runtime build before handing it to the compiler.
 *
 * Handlers emit fixed-layout records (src/wire.ts, docs/wire-format.md)
 * into a perf buffer and do no in-kernel aggregation — every enter/exit
 * lands in user space so the collector can pair spans, diff counters and
 * assign sequence numbers.  Buffer overruns surface as lost-record counts
 * on the perf reader; the collector turns those into drop markers.
 */

export type ProbeLevel = "token" | "graph" | "op" | "kernel";

export interface Attachment {
  level: ProbeLevel;
  kind: "uprobe" | "uretprobe" | "tracepoint";
  /** symbol in the runtime binary, or tracepoint category:name */
  target: string;
  /** function in HANDLER_SOURCE */
  handler: string;
}

/** The full 12-point attachment set; subsets drop whole levels. */
export const ATTACHMENTS: readonly Attachment[] = [
  { level: "token", kind: "uprobe", target: "llama_decode", handler: "on_token_enter" },
  { level: "token", kind: "uretprobe", target: "llama_decode", handler: "on_token_exit" },
  {
    level: "graph",
    kind: "uprobe",
    target: "ggml_backend_graph_compute_async",
    handler: "on_graph_enter",
  },
  {
    level: "graph",
    kind: "uretprobe",
    target: "ggml_backend_graph_compute_async",
    handler: "on_graph_exit",
  },
  { level: "op", kind: "uprobe", target: "ggml_compute_forward", handler: "on_op_enter_cpu" },
  { level: "op", kind: "uretprobe", target: "ggml_compute_forward", handler: "on_op_exit_cpu" },
  { level: "op", kind: "uprobe", target: "ggml_cl_compute_forward", handler: "on_op_enter_gpu" },
  { level: "op", kind: "uretprobe", target: "ggml_cl_compute_forward", handler: "on_op_exit_gpu" },
  { level: "op", kind: "uprobe", target: "ggml_rk_compute_forward", handler: "on_op_enter_npu" },
  { level: "op", kind: "uretprobe", target: "ggml_rk_compute_forward", handler: "on_op_exit_npu" },
  {
    level: "kernel",
    kind: "tracepoint",
    target: "sched:sched_switch",
    handler: "tracepoint__sched__sched_switch",
  },
  {
    level: "kernel",
    kind: "tracepoint",
    target: "sched:sched_wakeup",
    handler: "tracepoint__sched__sched_wakeup",
  },
];

/**
 * Slots in the `control` array map.  User space flips entries to shed
 * probe classes under a QoS target; a disabled class costs each handler
 * exactly one array lookup.  `token` stays enabled for the governor's own
 * rate signal, but the slot exists so the layout never changes.
 */
export const CONTROL_INDEX = {
  token: 0,
  graph: 1,
  op: 2,
  str: 3,
  pmc: 4,
} as const;

/**
 * Slots in the `tensor_offsets` array map: byte offsets of fields within
 * the runtime's tensor struct, which move between builds.  User space
 * resolves them once (debug info or a known build table) and writes them
 * before attaching.
 */
export const TENSOR_OFFSET_INDEX = {
  op: 0,
  name: 1,
  ne: 2,
  src: 3,
  data: 4,
} as const;

/**
 * Counter slot order.  Enter and exit handlers read the same slots in the
 * same order, and the stream header's n_pmc says how many are live, so
 * user space can subtract enter from exit readings slot by slot.
 */
export const PMC_SLOT_NAMES: readonly string[] = [
  "l3d_cache_refill",
  "mem_access_wr",
  "major-faults",
  "cycles",
  "idle-backend-cycles",
];

export const HANDLER_SOURCE: string = `
// Probe handlers for fine-grained inference tracing.  Compiled by BCC at
// load time; record layout must match docs/wire-format.md exactly (the
// static asserts below pin it).

#include <uapi/linux/ptrace.h>
#include <linux/sched.h>

#define WIRE_VERSION 1

#define KIND_TOKEN_ENTER 1
#define KIND_TOKEN_EXIT 2
#define KIND_GRAPH_ENTER 3
#define KIND_GRAPH_EXIT 4
#define KIND_OP_ENTER 5
#define KIND_OP_EXIT 6
#define KIND_SCHED_SWITCH 7
#define KIND_SCHED_WAKEUP 8

#define RECFLAG_PAYLOAD_FAULT (1 << 0)
#define RECFLAG_NAME_TRUNCATED (1 << 1)
#define RECFLAG_PMC_SKIPPED (1 << 2)

#define BACKEND_CPU 0
#define BACKEND_OPENCL_GPU 1
#define BACKEND_NPU 2

#define NAME_MAX_BYTES 63
#define MAX_SRCS 10
#define MAX_PMC_SLOTS 8
#define MAX_EXPERT_SLOTS 8

// control map slots (CONTROL_INDEX in handlers.ts)
#define CTL_TOKEN 0
#define CTL_GRAPH 1
#define CTL_OP 2
#define CTL_STR 3
#define CTL_PMC 4
#define CTL_COUNT 5

// tensor field offset slots (TENSOR_OFFSET_INDEX in handlers.ts)
#define TOFF_OP 0
#define TOFF_NAME 1
#define TOFF_NE 2
#define TOFF_SRC 3
#define TOFF_DATA 4
#define TOFF_COUNT 5

#define N_PMC_SLOTS 5            // PATCHED at load time (<= MAX_PMC_SLOTS)
#define BACKEND_GUID_OFFSET 8    // PATCHED at load time
#define MAX_CPUS 16              // PATCHED at load time

// ---- wire records (little-endian, packed; see docs/wire-format.md) ----

struct token_record {
    u8 kind;
    u8 flags;
    u8 backend;
    u8 _pad0;
    u64 ts_ns;
    u32 pid;
    u32 tid;
    u32 cpu;
    u32 batch_size;
} __attribute__((packed));

struct graph_record {
    u8 kind;
    u8 flags;
    u8 backend;
    u8 _pad0;
    u64 ts_ns;
    u32 pid;
    u32 tid;
    u32 cpu;
    char guid[16];
} __attribute__((packed));

struct op_record {
    u8 kind;
    u8 flags;
    u8 backend;
    u8 _pad0;
    u64 ts_ns;
    u32 pid;
    u32 tid;
    u32 cpu;
    u64 op_addr;
    u32 op_type;
    u8 expert_count;
    u8 _pad1;
    u16 _pad2;
    char name[NAME_MAX_BYTES + 1];
    u64 dims[4];
    u64 src_addrs[MAX_SRCS];
    u64 pmc[MAX_PMC_SLOTS];
    u32 expert_ids[MAX_EXPERT_SLOTS];
} __attribute__((packed));

struct sched_record {
    u8 kind;
    u8 flags;
    u8 backend;
    u8 _pad0;
    u64 ts_ns;
    u32 pid;
    u32 tid;
    u32 cpu;
    u32 prev_tid;
    u32 next_tid;
    u32 wakee_tid;
    u32 prev_state;
} __attribute__((packed));

_Static_assert(sizeof(struct token_record) == 28, "token record layout");
_Static_assert(sizeof(struct graph_record) == 40, "graph record layout");
_Static_assert(sizeof(struct op_record) == 312, "op record layout");
_Static_assert(sizeof(struct sched_record) == 40, "sched record layout");
_Static_assert(offsetof(struct op_record, op_addr) == 24, "op record layout");
_Static_assert(offsetof(struct op_record, op_type) == 32, "op record layout");
_Static_assert(offsetof(struct op_record, expert_count) == 36, "op record layout");
_Static_assert(offsetof(struct op_record, name) == 40, "op record layout");
_Static_assert(offsetof(struct op_record, dims) == 104, "op record layout");
_Static_assert(offsetof(struct op_record, src_addrs) == 136, "op record layout");
_Static_assert(offsetof(struct op_record, pmc) == 216, "op record layout");
_Static_assert(offsetof(struct op_record, expert_ids) == 280, "op record layout");

// ---- maps ----

BPF_PERF_OUTPUT(events);

// toggles flipped by the QoS governor while probes stay attached
BPF_ARRAY(control, u32, CTL_COUNT);

// tensor struct field offsets for the traced runtime build
BPF_ARRAY(tensor_offsets, u64, TOFF_COUNT);

// inference thread ids, written by user space after the first token probe
BPF_HASH(traced_tids, u32, u8);

// tensor pointer stashed between an op uprobe and its uretprobe, per thread
BPF_HASH(inflight_op, u32, u64);

// op records exceed the BPF stack budget, so handlers build them in
// per-cpu scratch.  Handlers never nest on one cpu (no faults, no sleep),
// so a single slot per cpu suffices.
BPF_PERCPU_ARRAY(op_scratch, struct op_record, 1);

// one perf-counter array per slot; user space opens them in the order of
// PMC_SLOT_NAMES, which is also the stream-header slot order
BPF_PERF_ARRAY(pmc_slot0, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot1, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot2, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot3, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot4, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot5, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot6, MAX_CPUS);
BPF_PERF_ARRAY(pmc_slot7, MAX_CPUS);

// ---- helpers ----

static __always_inline int class_enabled(int slot)
{
    u32 *on = control.lookup(&slot);
    return on != 0 && *on != 0;
}

static __always_inline u64 tensor_offset(int slot)
{
    u64 *off = tensor_offsets.lookup(&slot);
    return off != 0 ? *off : 0;
}

static __always_inline void fill_common(void *rec_kind, u8 kind, u8 backend)
{
    // all four record structs share the 24-byte prefix, so write through
    // the token layout
    struct token_record *rec = rec_kind;
    u64 pid_tgid = bpf_get_current_pid_tgid();
    rec->kind = kind;
    rec->flags = 0;
    rec->backend = backend;
    rec->_pad0 = 0;
    rec->ts_ns = bpf_ktime_get_ns();
    rec->pid = pid_tgid >> 32;
    rec->tid = (u32)pid_tgid;
    rec->cpu = bpf_get_smp_processor_id();
}

static __always_inline u64 read_pmc_slot(int slot, u32 cpu)
{
    switch (slot) {
    case 0: return pmc_slot0.perf_read(cpu);
    case 1: return pmc_slot1.perf_read(cpu);
    case 2: return pmc_slot2.perf_read(cpu);
    case 3: return pmc_slot3.perf_read(cpu);
    case 4: return pmc_slot4.perf_read(cpu);
    case 5: return pmc_slot5.perf_read(cpu);
    case 6: return pmc_slot6.perf_read(cpu);
    case 7: return pmc_slot7.perf_read(cpu);
    }
    return 0;
}

static __always_inline void fill_pmc(struct op_record *rec)
{
    // enter and exit read the same slots in the same order so user space
    // can subtract; a failed read leaves the region zeroed and flags the
    // record instead of shipping garbage
    if (!class_enabled(CTL_PMC))
        return;
    u32 cpu = rec->cpu;
    int failed = 0;
#pragma unroll
    for (int i = 0; i < MAX_PMC_SLOTS; i++) {
        if (i >= N_PMC_SLOTS)
            break;
        u64 v = read_pmc_slot(i, cpu);
        if ((s64)v < 0) {
            failed = 1;
            break;
        }
        rec->pmc[i] = v;
    }
    if (failed) {
#pragma unroll
        for (int i = 0; i < MAX_PMC_SLOTS; i++)
            rec->pmc[i] = 0;
        rec->flags |= RECFLAG_PMC_SKIPPED;
    }
}

static __always_inline void fill_tensor(struct op_record *rec, const void *tensor)
{
    // op_type is identity-critical, so read it even when string parsing
    // is shed; a fault here still ships the record, just without payload
    u32 op = 0;
    if (bpf_probe_read_user(&op, sizeof(op), tensor + tensor_offset(TOFF_OP)) < 0)
        rec->flags |= RECFLAG_PAYLOAD_FAULT;
    rec->op_type = op;

    if (!class_enabled(CTL_STR))
        return;

    // the name lives inline in the tensor struct; the copy stops at 63
    // bytes + NUL.  A read of exactly sizeof(name) cannot tell a 63-byte
    // name from a longer one, so the flag errs toward truncated.
    int len = bpf_probe_read_user_str(rec->name, sizeof(rec->name),
                                      tensor + tensor_offset(TOFF_NAME));
    if (len < 0)
        rec->flags |= RECFLAG_PAYLOAD_FAULT;
    else if (len == sizeof(rec->name))
        rec->flags |= RECFLAG_NAME_TRUNCATED;

    if (bpf_probe_read_user(rec->dims, sizeof(rec->dims),
                            tensor + tensor_offset(TOFF_NE)) < 0 ||
        bpf_probe_read_user(rec->src_addrs, sizeof(rec->src_addrs),
                            tensor + tensor_offset(TOFF_SRC)) < 0) {
        // decoders treat dims/sources as invalid when this flag is set,
        // so zero-fill rather than ship a half-read region
        rec->flags |= RECFLAG_PAYLOAD_FAULT;
#pragma unroll
        for (int i = 0; i < 4; i++)
            rec->dims[i] = 0;
#pragma unroll
        for (int i = 0; i < MAX_SRCS; i++)
            rec->src_addrs[i] = 0;
    }
}

static __always_inline void fill_experts(struct op_record *rec)
{
    // MUL_MAT_ID routes rows through experts chosen at runtime; the chosen
    // ids sit in the *data* of the third source tensor, hence the
    // two-level dereference: tensor -> src[2] -> data -> ids.  The walk
    // starts from src_addrs, so shedding CTL_STR also sheds expert ids.
    if (rec->op_type != 4 /* MUL_MAT_ID */)
        return;
    u64 ids_tensor = rec->src_addrs[2];
    if (ids_tensor == 0)
        return;
    u64 ids_data = 0;
    if (bpf_probe_read_user(&ids_data, sizeof(ids_data),
                            (void *)(ids_tensor + tensor_offset(TOFF_DATA))) < 0 ||
        ids_data == 0)
        return;
    u64 n_used = 0;
    if (bpf_probe_read_user(&n_used, sizeof(n_used),
                            (void *)(ids_tensor + tensor_offset(TOFF_NE))) < 0)
        return;
    if (n_used > MAX_EXPERT_SLOTS)
        n_used = MAX_EXPERT_SLOTS;
    u32 ids[MAX_EXPERT_SLOTS] = {};
    if (bpf_probe_read_user(ids, sizeof(u32) * (u32)n_used, (void *)ids_data) < 0)
        return;
    rec->expert_count = n_used;
#pragma unroll
    for (int i = 0; i < MAX_EXPERT_SLOTS; i++)
        rec->expert_ids[i] = ids[i];
}

static __always_inline int emit_op(struct pt_regs *ctx, u8 kind, u8 backend,
                                   const void *tensor)
{
    int zero = 0;
    struct op_record *rec = op_scratch.lookup(&zero);
    if (rec == 0)
        return 0;
    __builtin_memset(rec, 0, sizeof(*rec));
    fill_common(rec, kind, backend);
    rec->op_addr = (u64)tensor;
    fill_tensor(rec, tensor);
    fill_experts(rec);
    if (backend == BACKEND_CPU)
        fill_pmc(rec);   // core counters only make sense where the work runs
    events.perf_submit(ctx, rec, sizeof(*rec));
    return 0;
}

static __always_inline int op_enter(struct pt_regs *ctx, u8 backend)
{
    if (!class_enabled(CTL_OP))
        return 0;
    // the tensor is the second argument at all three per-backend entry
    // points; stash it so the return probe can emit a matching record
    const void *tensor = (const void *)PT_REGS_PARM2(ctx);
    u32 tid = (u32)bpf_get_current_pid_tgid();
    u64 addr = (u64)tensor;
    inflight_op.update(&tid, &addr);
    return emit_op(ctx, KIND_OP_ENTER, backend, tensor);
}

static __always_inline int op_exit(struct pt_regs *ctx, u8 backend)
{
    if (!class_enabled(CTL_OP))
        return 0;
    u32 tid = (u32)bpf_get_current_pid_tgid();
    u64 *addr = inflight_op.lookup(&tid);
    if (addr == 0)
        return 0;   // attached mid-op; drop the unmatched exit
    u64 tensor = *addr;
    inflight_op.delete(&tid);
    return emit_op(ctx, KIND_OP_EXIT, backend, (const void *)tensor);
}

// ---- token probes (llama_decode) ----

int on_token_enter(struct pt_regs *ctx)
{
    if (!class_enabled(CTL_TOKEN))
        return 0;
    struct token_record rec = {};
    fill_common(&rec, KIND_TOKEN_ENTER, 0);
    // llama_decode(ctx, batch): the batch is passed by value and its first
    // word is the token count
    rec.batch_size = (u32)PT_REGS_PARM2(ctx);
    events.perf_submit(ctx, &rec, sizeof(rec));
    return 0;
}

int on_token_exit(struct pt_regs *ctx)
{
    if (!class_enabled(CTL_TOKEN))
        return 0;
    struct token_record rec = {};
    fill_common(&rec, KIND_TOKEN_EXIT, 0);
    events.perf_submit(ctx, &rec, sizeof(rec));
    return 0;
}

// ---- graph probes (ggml_backend_graph_compute_async) ----

static __always_inline void fill_guid(struct graph_record *rec, const void *backend_obj)
{
    // hex-encode the low 8 guid bytes: 16 ascii chars, enough to key
    // backends within a session
    u64 raw = 0;
    if (bpf_probe_read_user(&raw, sizeof(raw),
                            backend_obj + BACKEND_GUID_OFFSET) < 0) {
        rec->flags |= RECFLAG_PAYLOAD_FAULT;
        raw = 0;
    }
    static const char digits[] = "0123456789abcdef";
#pragma unroll
    for (int i = 0; i < 8; i++) {
        u8 byte = (raw >> (8 * i)) & 0xff;
        rec->guid[2 * i] = digits[byte >> 4];
        rec->guid[2 * i + 1] = digits[byte & 0xf];
    }
}

int on_graph_enter(struct pt_regs *ctx)
{
    if (!class_enabled(CTL_GRAPH))
        return 0;
    struct graph_record rec = {};
    fill_common(&rec, KIND_GRAPH_ENTER, 0);
    fill_guid(&rec, (const void *)PT_REGS_PARM1(ctx));
    events.perf_submit(ctx, &rec, sizeof(rec));
    return 0;
}

int on_graph_exit(struct pt_regs *ctx)
{
    if (!class_enabled(CTL_GRAPH))
        return 0;
    struct graph_record rec = {};
    fill_common(&rec, KIND_GRAPH_EXIT, 0);
    // the return probe cannot re-read arguments; user space pairs it with
    // the enter on the same thread, so the guid stays zeroed here
    events.perf_submit(ctx, &rec, sizeof(rec));
    return 0;
}

// ---- op probes, one enter/exit pair per backend entry point ----

int on_op_enter_cpu(struct pt_regs *ctx) { return op_enter(ctx, BACKEND_CPU); }
int on_op_exit_cpu(struct pt_regs *ctx) { return op_exit(ctx, BACKEND_CPU); }
int on_op_enter_gpu(struct pt_regs *ctx) { return op_enter(ctx, BACKEND_OPENCL_GPU); }
int on_op_exit_gpu(struct pt_regs *ctx) { return op_exit(ctx, BACKEND_OPENCL_GPU); }
int on_op_enter_npu(struct pt_regs *ctx) { return op_enter(ctx, BACKEND_NPU); }
int on_op_exit_npu(struct pt_regs *ctx) { return op_exit(ctx, BACKEND_NPU); }

// ---- scheduler tracepoints ----

TRACEPOINT_PROBE(sched, sched_switch)
{
    u32 prev = args->prev_pid;
    u32 next = args->next_pid;
    // ship only switches touching an inference thread; everything else is
    // noise at this frequency
    if (traced_tids.lookup(&prev) == 0 && traced_tids.lookup(&next) == 0)
        return 0;
    struct sched_record rec = {};
    fill_common(&rec, KIND_SCHED_SWITCH, 0);
    rec.prev_tid = prev;
    rec.next_tid = next;
    rec.prev_state = (u32)args->prev_state;
    events.perf_submit(args, &rec, sizeof(rec));
    return 0;
}

TRACEPOINT_PROBE(sched, sched_wakeup)
{
    u32 wakee = args->pid;
    if (traced_tids.lookup(&wakee) == 0)
        return 0;
    struct sched_record rec = {};
    fill_common(&rec, KIND_SCHED_WAKEUP, 0);
    rec.wakee_tid = wakee;
    events.perf_submit(args, &rec, sizeof(rec));
    return 0;
}
`;
