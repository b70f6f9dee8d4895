/* Minimal freestanding BPF support header.
 *
 * Provides just the pieces of libbpf's bpf_helpers.h that the collector
 * program needs: the SEC()/map-definition macros, the helper-function
 * stubs (by their stable UAPI helper IDs), and the x86_64 pt_regs layout
 * for kprobe argument access. Vendored so the program builds with a bare
 * clang -target bpf and no libbpf development package installed.
 */
#ifndef AGENTSIGHT_BPF_COMPAT_H
#define AGENTSIGHT_BPF_COMPAT_H

typedef unsigned char      __u8;
typedef unsigned short     __u16;
typedef unsigned int       __u32;
typedef unsigned long long __u64;
typedef signed char        __s8;
typedef short              __s16;
typedef int                __s32;
typedef long long          __s64;
typedef __s32 pid_t;

#define SEC(name) __attribute__((section(name), used))
#define __always_inline inline __attribute__((always_inline))

/* BTF-style map definition fields (as in libbpf). */
#define __uint(name, val) int (*name)[val]
#define __type(name, val) typeof(val) *name

/* Map types used by the collector (from include/uapi/linux/bpf.h). */
#define BPF_MAP_TYPE_HASH          1
#define BPF_MAP_TYPE_PERCPU_ARRAY  6
#define BPF_MAP_TYPE_RINGBUF       27

#define BPF_ANY     0
#define BPF_NOEXIST 1
#define BPF_EXIST   2

/* Helper stubs, keyed by stable helper IDs (uapi/linux/bpf.h). */
static void *(*bpf_map_lookup_elem)(void *map, const void *key) =
    (void *)1;
static long (*bpf_map_update_elem)(void *map, const void *key,
                                   const void *value, __u64 flags) =
    (void *)2;
static long (*bpf_map_delete_elem)(void *map, const void *key) =
    (void *)3;
static __u64 (*bpf_ktime_get_ns)(void) = (void *)5;
static __u64 (*bpf_get_current_pid_tgid)(void) = (void *)14;
static long (*bpf_get_current_comm)(void *buf, __u32 size) = (void *)16;
static long (*bpf_probe_read_user)(void *dst, __u32 size,
                                   const void *src) = (void *)112;
static long (*bpf_probe_read_kernel)(void *dst, __u32 size,
                                     const void *src) = (void *)113;
static long (*bpf_probe_read_user_str)(void *dst, __u32 size,
                                       const void *src) = (void *)114;
static long (*bpf_probe_read_kernel_str)(void *dst, __u32 size,
                                         const void *src) = (void *)115;
static long (*bpf_ringbuf_output)(void *ringbuf, void *data, __u64 size,
                                  __u64 flags) = (void *)130;

/* x86_64 kernel pt_regs layout, for kprobe argument access. */
struct pt_regs {
    unsigned long r15;
    unsigned long r14;
    unsigned long r13;
    unsigned long r12;
    unsigned long bp;
    unsigned long bx;
    unsigned long r11;
    unsigned long r10;
    unsigned long r9;
    unsigned long r8;
    unsigned long ax;
    unsigned long cx;
    unsigned long dx;
    unsigned long si;
    unsigned long di;
    unsigned long orig_ax;
    unsigned long ip;
    unsigned long cs;
    unsigned long flags;
    unsigned long sp;
    unsigned long ss;
};

#define PT_REGS_PARM1(x) ((x)->di)
#define PT_REGS_PARM2(x) ((x)->si)
#define PT_REGS_PARM3(x) ((x)->dx)
#define PT_REGS_PARM4(x) ((x)->cx)
#define PT_REGS_PARM5(x) ((x)->r8)
#define PT_REGS_RC(x)    ((x)->ax)

#endif /* AGENTSIGHT_BPF_COMPAT_H */
