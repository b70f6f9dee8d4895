/* Kernel-side collectors: TLS plaintext taps, process lifecycle, and
 * selected syscalls, with in-kernel lineage filtering.
 *
 * Every probe body checks the admission filter first, before touching
 * any payload, so events from unrelated processes are rejected at the
 * cheapest possible point. Records are emitted to a ring buffer in the
 * wire layout consumed by the userspace collector (see ../src/wire.ts):
 * a little-endian {u64 ts, u32 pid, u32 tid, u16 kind, u16 flags,
 * u32 data_len} header followed by data_len payload bytes. Emission
 * never blocks the traced process: when the ring buffer is full the
 * record is dropped and a per-CPU drop counter is incremented.
 */
#include "bpf_compat.h"

char LICENSE[] SEC("license") = "GPL";

/* Record kinds; must match RecordKind in ../src/wire.ts. */
#define K_TLS_READ     1
#define K_TLS_WRITE    2
#define K_PROC_FORK    3
#define K_PROC_EXEC    4
#define K_PROC_EXIT    5
#define K_FS_OPEN      6
#define K_FS_WRITE     7
#define K_FS_READ      8
#define K_NET_CONNECT  9
#define K_NET_SEND     10

/* Flag bits; must match RecordFlags in ../src/wire.ts. */
#define F_TRUNCATED 0x1  /* payload cut at the capture limit */
#define F_FAULT     0x2  /* a userspace read faulted; fields best-effort */

#define MAX_PAYLOAD 16384          /* total payload cap per record */
#define MAX_TLS_DATA (MAX_PAYLOAD - 4)  /* after the 4-byte fd prefix */
#define COMM_LEN 16
#define MAX_ARGS 32
#define MAX_ARG_LEN 256

struct record_hdr {
    __u64 ts;
    __u32 pid;
    __u32 tid;
    __u16 kind;
    __u16 flags;
    __u32 data_len;
} __attribute__((packed));

struct scratch_buf {
    struct record_hdr hdr;
    __u8 data[MAX_PAYLOAD];
} __attribute__((packed));

struct {
    __uint(type, BPF_MAP_TYPE_HASH);
    __uint(max_entries, 65536);
    __type(key, __u32);
    __type(value, __u8);
} agentsight_filter SEC(".maps");

struct {
    __uint(type, BPF_MAP_TYPE_PERCPU_ARRAY);
    __uint(max_entries, 1);
    __type(key, __u32);
    __type(value, __u64);
} agentsight_drops SEC(".maps");

struct {
    __uint(type, BPF_MAP_TYPE_RINGBUF);
    __uint(max_entries, 1 << 24);
} agentsight_events SEC(".maps");

/* Per-CPU staging area; records are assembled here then copied out. */
struct {
    __uint(type, BPF_MAP_TYPE_PERCPU_ARRAY);
    __uint(max_entries, 1);
    __type(key, __u32);
    __type(value, struct scratch_buf);
} agentsight_scratch SEC(".maps");

static __always_inline int admitted(__u32 pid)
{
    return bpf_map_lookup_elem(&agentsight_filter, &pid) != 0;
}

static __always_inline struct scratch_buf *get_scratch(void)
{
    __u32 zero = 0;
    return bpf_map_lookup_elem(&agentsight_scratch, &zero);
}

static __always_inline void fill_hdr(struct scratch_buf *s, __u16 kind,
                                     __u16 flags, __u32 data_len)
{
    __u64 id = bpf_get_current_pid_tgid();
    s->hdr.ts = bpf_ktime_get_ns();
    s->hdr.pid = id >> 32;
    s->hdr.tid = (__u32)id;
    s->hdr.kind = kind;
    s->hdr.flags = flags;
    s->hdr.data_len = data_len;
}

/* Emit the staged record; on ring-buffer pressure, count the drop and
 * return without ever blocking the traced process. */
static __always_inline void emit(struct scratch_buf *s)
{
    __u32 len = s->hdr.data_len;

    if (len > MAX_PAYLOAD)
        len = MAX_PAYLOAD;
    if (bpf_ringbuf_output(&agentsight_events, s,
                           sizeof(struct record_hdr) + len, 0) < 0) {
        __u32 zero = 0;
        __u64 *drops = bpf_map_lookup_elem(&agentsight_drops, &zero);
        if (drops)
            *drops += 1;
    }
}

/* --- TLS boundary (uprobes on the crypto library) ----------------- */

static __always_inline void tls_capture(struct pt_regs *ctx, __u16 kind)
{
    __u32 pid = bpf_get_current_pid_tgid() >> 32;
    struct scratch_buf *s;
    const void *buf;
    long num;
    __u16 flags = 0;
    __u32 fd = 0;  /* fd is not visible at the SSL layer; 0 = unknown */

    if (!admitted(pid))
        return;
    s = get_scratch();
    if (!s)
        return;

    buf = (const void *)PT_REGS_PARM2(ctx);
    num = (long)PT_REGS_PARM3(ctx);
    if (num < 0)
        num = 0;
    if (num > MAX_TLS_DATA) {
        num = MAX_TLS_DATA;
        flags |= F_TRUNCATED;
    }
    __builtin_memcpy(&s->data[0], &fd, 4);
    if (bpf_probe_read_user(&s->data[4], (__u32)num, buf) < 0)
        flags |= F_FAULT;
    fill_hdr(s, kind, flags, 4 + (__u32)num);
    emit(s);
}

SEC("uprobe/SSL_write")
int probe_ssl_write(struct pt_regs *ctx)
{
    tls_capture(ctx, K_TLS_WRITE);
    return 0;
}

SEC("uprobe/SSL_read")
int probe_ssl_read(struct pt_regs *ctx)
{
    tls_capture(ctx, K_TLS_READ);
    return 0;
}

/* --- Process lifecycle (stable scheduler tracepoints) -------------- */

struct fork_ctx {  /* tracepoint format: sched/sched_process_fork */
    __u64 __common;
    char parent_comm[COMM_LEN];
    pid_t parent_pid;
    char child_comm[COMM_LEN];
    pid_t child_pid;
};

SEC("tracepoint/sched/sched_process_fork")
int tp_fork(struct fork_ctx *ctx)
{
    __u32 parent = ctx->parent_pid;
    __u32 child = ctx->child_pid;
    __u8 one = 1;
    struct scratch_buf *s;

    if (!admitted(parent))
        return 0;
    /* Lineage rule: a child of an admitted process is admitted. */
    bpf_map_update_elem(&agentsight_filter, &child, &one, BPF_ANY);

    s = get_scratch();
    if (!s)
        return 0;
    bpf_probe_read_kernel(&s->data[0], COMM_LEN, ctx->parent_comm);
    __builtin_memcpy(&s->data[COMM_LEN], &child, 4);
    bpf_probe_read_kernel(&s->data[COMM_LEN + 4], COMM_LEN,
                          ctx->child_comm);
    fill_hdr(s, K_PROC_FORK, 0, COMM_LEN + 4 + COMM_LEN);
    /* The tracepoint fires in the parent's context, but attribute the
     * record to the forking parent explicitly. */
    s->hdr.pid = parent;
    emit(s);
    return 0;
}

struct exec_ctx {  /* tracepoint format: sched/sched_process_exec */
    __u64 __common;
    __u32 __data_loc_filename;
    pid_t pid;
    pid_t old_pid;
};

SEC("tracepoint/sched/sched_process_exec")
int tp_exec(struct exec_ctx *ctx)
{
    __u32 pid = ctx->pid;
    struct scratch_buf *s;
    __u16 flags = 0;
    __u16 argc = 1;
    long n;
    unsigned int off = ctx->__data_loc_filename & 0xffff;

    if (!admitted(pid))
        return 0;
    s = get_scratch();
    if (!s)
        return 0;
    bpf_get_current_comm(&s->data[0], COMM_LEN);
    /* Payload: comm[16], u16 argc, then NUL-separated strings. The
     * tracepoint exposes the resolved filename; full argv is captured
     * by the execve kprobe below. */
    n = bpf_probe_read_kernel_str(&s->data[COMM_LEN + 2], MAX_ARG_LEN,
                                  (char *)ctx + off);
    if (n < 0) {
        n = 1;
        s->data[COMM_LEN + 2] = 0;
        flags |= F_FAULT;
    }
    __builtin_memcpy(&s->data[COMM_LEN], &argc, 2);
    fill_hdr(s, K_PROC_EXEC, flags, COMM_LEN + 2 + (__u32)n);
    s->hdr.pid = pid;
    emit(s);
    return 0;
}

struct exit_ctx {  /* tracepoint format: sched/sched_process_exit */
    __u64 __common;
    char comm[COMM_LEN];
    pid_t pid;
    int prio;
};

SEC("tracepoint/sched/sched_process_exit")
int tp_exit(struct exit_ctx *ctx)
{
    __u32 pid = ctx->pid;
    __s32 exit_code = 0;
    struct scratch_buf *s;

    if (!admitted(pid))
        return 0;
    s = get_scratch();
    if (s) {
        bpf_probe_read_kernel(&s->data[0], COMM_LEN, ctx->comm);
        __builtin_memcpy(&s->data[COMM_LEN], &exit_code, 4);
        fill_hdr(s, K_PROC_EXIT, 0, COMM_LEN + 4);
        s->hdr.pid = pid;
        emit(s);
    }
    /* Remove immediately: bounds the filter and prevents stale
     * admission after PID reuse. */
    bpf_map_delete_elem(&agentsight_filter, &pid);
    return 0;
}

/* --- Syscall boundary (kprobes) ------------------------------------ */

SEC("kprobe/do_sys_openat2")
int kp_openat2(struct pt_regs *ctx)
{
    __u32 pid = bpf_get_current_pid_tgid() >> 32;
    const char *filename;
    struct scratch_buf *s;
    __u16 flags = 0;
    long n;

    if (!admitted(pid))
        return 0;
    s = get_scratch();
    if (!s)
        return 0;
    bpf_get_current_comm(&s->data[0], COMM_LEN);
    filename = (const char *)PT_REGS_PARM2(ctx);
    /* Payload: comm[16], s32 fd, then the NUL-terminated path. The
     * return fd is not visible at entry; -1 = unknown (a kretprobe
     * pairing may refine it). */
    __s32 fd = -1;
    __builtin_memcpy(&s->data[COMM_LEN], &fd, 4);
    n = bpf_probe_read_user_str(&s->data[COMM_LEN + 4], MAX_ARG_LEN,
                                filename);
    if (n < 0) {
        /* Path-read fault: record an empty path, flag it. */
        n = 1;
        s->data[COMM_LEN + 4] = 0;
        flags |= F_FAULT | F_TRUNCATED;
    }
    fill_hdr(s, K_FS_OPEN, flags, COMM_LEN + 4 + (__u32)n);
    emit(s);
    return 0;
}

struct sockaddr_in_user {
    __u16 sin_family;
    __u16 sin_port;       /* network byte order */
    __u8 sin_addr[4];     /* network byte order */
};

SEC("kprobe/__sys_connect")
int kp_connect(struct pt_regs *ctx)
{
    __u32 pid = bpf_get_current_pid_tgid() >> 32;
    struct sockaddr_in_user sa = {};
    struct scratch_buf *s;
    __u16 flags = 0;

    if (!admitted(pid))
        return 0;
    s = get_scratch();
    if (!s)
        return 0;
    if (bpf_probe_read_user(&sa, sizeof(sa),
                            (void *)PT_REGS_PARM2(ctx)) < 0)
        flags |= F_FAULT;
    bpf_get_current_comm(&s->data[0], COMM_LEN);
    /* Payload: comm[16], addr[4] (network order), u16 port (host
     * order, converted here from the sockaddr's big-endian field). */
    __builtin_memcpy(&s->data[COMM_LEN], sa.sin_addr, 4);
    __u16 port = (__u16)((sa.sin_port >> 8) | (sa.sin_port << 8));
    __builtin_memcpy(&s->data[COMM_LEN + 4], &port, 2);
    fill_hdr(s, K_NET_CONNECT, flags, COMM_LEN + 4 + 2);
    emit(s);
    return 0;
}

static __always_inline void fs_io(struct pt_regs *ctx, __u16 kind)
{
    __u32 pid = bpf_get_current_pid_tgid() >> 32;
    struct scratch_buf *s;

    if (!admitted(pid))
        return;
    s = get_scratch();
    if (!s)
        return;
    bpf_get_current_comm(&s->data[0], COMM_LEN);
    /* Payload: comm[16], s32 fd, u32 len. */
    __s32 fd = (__s32)PT_REGS_PARM1(ctx);
    __u32 len = (__u32)PT_REGS_PARM3(ctx);
    __builtin_memcpy(&s->data[COMM_LEN], &fd, 4);
    __builtin_memcpy(&s->data[COMM_LEN + 4], &len, 4);
    fill_hdr(s, kind, 0, COMM_LEN + 8);
    emit(s);
}

SEC("kprobe/ksys_write")
int kp_write(struct pt_regs *ctx)
{
    fs_io(ctx, K_FS_WRITE);
    return 0;
}

SEC("kprobe/ksys_read")
int kp_read(struct pt_regs *ctx)
{
    fs_io(ctx, K_FS_READ);
    return 0;
}

SEC("kprobe/__x64_sys_execve")
int kp_execve(struct pt_regs *ctx)
{
    __u32 pid = bpf_get_current_pid_tgid() >> 32;
    struct pt_regs real;
    const char *filename;
    const char *const *argv;
    struct scratch_buf *s;
    __u16 flags = 0;
    __u16 argc = 0;
    __u32 off;
    long n;
    int i;

    if (!admitted(pid))
        return 0;
    s = get_scratch();
    if (!s)
        return 0;
    /* Syscall-wrapper convention: the real pt_regs is the first arg. */
    if (bpf_probe_read_kernel(&real, sizeof(real),
                              (void *)PT_REGS_PARM1(ctx)) < 0)
        return 0;
    filename = (const char *)PT_REGS_PARM1(&real);
    argv = (const char *const *)PT_REGS_PARM2(&real);

    bpf_get_current_comm(&s->data[0], COMM_LEN);
    off = COMM_LEN + 2;
    n = bpf_probe_read_user_str(&s->data[off], MAX_ARG_LEN, filename);
    if (n < 0) {
        n = 1;
        s->data[off] = 0;
        flags |= F_FAULT;
    }
    off += (__u32)n;
    argc = 1;

    /* argv capped at MAX_ARGS entries of MAX_ARG_LEN bytes each; a
     * read fault truncates the list but still emits the record. */
    for (i = 0; i < MAX_ARGS; i++) {
        const char *arg = 0;
        if (bpf_probe_read_user(&arg, sizeof(arg), &argv[i]) < 0) {
            flags |= F_FAULT | F_TRUNCATED;
            break;
        }
        if (!arg)
            break;
        if (off + MAX_ARG_LEN > MAX_PAYLOAD) {
            flags |= F_TRUNCATED;
            break;
        }
        n = bpf_probe_read_user_str(&s->data[off], MAX_ARG_LEN, arg);
        if (n < 0) {
            flags |= F_FAULT | F_TRUNCATED;
            break;
        }
        off += (__u32)n;
        argc += 1;
    }
    __builtin_memcpy(&s->data[COMM_LEN], &argc, 2);
    fill_hdr(s, K_PROC_EXEC, flags, off);
    emit(s);
    return 0;
}
