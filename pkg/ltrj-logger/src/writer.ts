import { closeSync, openSync, writeSync } from 'node:fs';
import { crc32 } from 'node:zlib';

// LTRJ v1 layout (all integers little-endian):
//
//   magic        4 bytes  "LTRJ"
//   version      u16      1
//   dtype code   u8       0 = float32, 1 = float64
//   reserved     u8       0
//   n_samples    u64
//   n_snapshots  u32      back-patched at finalize
//   n_classes    u32
//   tag length   u16
//   split tag    ...      UTF-8
//   sample_ids   N x u64
//   labels       N x u32
//   losses       N x S, sample-major, declared dtype
//   checksum     u32      CRC32 over every preceding byte
//
// Snapshots arrive epoch-major but the loss region is sample-major, so
// they are buffered in memory and interleaved when the file is closed.

const MAGIC = 'LTRJ';
const VERSION = 1;
const HEADER_SIZE = 26;
const SNAPSHOT_COUNT_OFFSET = 16;

export type Dtype = 'f32' | 'f64';

export interface WriterOptions {
    splitTag?: string; // default "train"
    dtype?: Dtype; // default "f32"
}

export class ShimError extends Error {}

function toU64(value: number | bigint, what: string): bigint {
    const v = typeof value === 'bigint' ? value : (() => {
        if (!Number.isSafeInteger(value)) {
            throw new ShimError(`${what} ${value} is not an exact integer; pass a bigint`);
        }
        return BigInt(value);
    })();
    if (v < 0n || v >= 1n << 64n) throw new ShimError(`${what} ${v} does not fit in u64`);
    return v;
}

export class ShimWriter {
    private fd: number;
    private prefix: Buffer; // header + tag + ids + labels, as written at open
    private snapshots: (Float32Array | Float64Array)[] = [];
    private finalized = false;
    readonly path: string;
    readonly sampleCount: number;
    readonly classCount: number;
    readonly splitTag: string;
    readonly dtype: Dtype;

    constructor(
        path: string,
        sampleIds: ArrayLike<number | bigint>,
        labels: ArrayLike<number>,
        nClasses: number,
        opts: WriterOptions = {},
    ) {
        const splitTag = opts.splitTag ?? 'train';
        const dtype = opts.dtype ?? 'f32';
        if (dtype !== 'f32' && dtype !== 'f64') {
            throw new ShimError(`unknown dtype ${String(dtype)}`);
        }
        if (!Number.isInteger(nClasses) || nClasses < 1 || nClasses > 0xffffffff) {
            throw new ShimError(`class count must be a positive u32, got ${nClasses}`);
        }
        const n = sampleIds.length;
        if (n < 1) throw new ShimError('writer needs at least one sample');
        if (labels.length !== n) {
            throw new ShimError(`labels length ${labels.length} does not match ${n} sample ids`);
        }
        const tag = Buffer.from(splitTag, 'utf8');
        if (tag.length > 0xffff) throw new ShimError('split tag exceeds 65535 bytes');

        // everything is validated before the file is opened
        const ids = new BigUint64Array(n);
        const seen = new Set<bigint>();
        for (let i = 0; i < n; i++) {
            ids[i] = toU64(sampleIds[i], 'sample id');
            if (seen.has(ids[i])) throw new ShimError(`duplicate id ${ids[i]}`);
            seen.add(ids[i]);
        }
        const labelBuf = Buffer.alloc(n * 4);
        for (let i = 0; i < n; i++) {
            const label = labels[i];
            if (!Number.isInteger(label) || label < 0 || label >= nClasses) {
                throw new ShimError(`label ${label} at sample ${i} not in [0, ${nClasses})`);
            }
            labelBuf.writeUInt32LE(label, i * 4);
        }
        const head = Buffer.alloc(HEADER_SIZE);
        head.write(MAGIC, 0, 'ascii');
        head.writeUInt16LE(VERSION, 4);
        head.writeUInt8(dtype === 'f32' ? 0 : 1, 6);
        head.writeUInt8(0, 7);
        head.writeBigUInt64LE(BigInt(n), 8);
        head.writeUInt32LE(0, SNAPSHOT_COUNT_OFFSET);
        head.writeUInt32LE(nClasses, 20);
        head.writeUInt16LE(tag.length, 24);
        const idBuf = Buffer.alloc(n * 8);
        for (let i = 0; i < n; i++) idBuf.writeBigUInt64LE(ids[i], i * 8);

        this.path = path;
        this.sampleCount = n;
        this.classCount = nClasses;
        this.splitTag = splitTag;
        this.dtype = dtype;
        this.prefix = Buffer.concat([head, tag, idBuf, labelBuf]);
        this.fd = openSync(path, 'w');
        writeSync(this.fd, this.prefix);
    }

    get snapshotCount(): number {
        return this.snapshots.length;
    }

    /** Record one epoch's losses, one finite value per declared sample. */
    logEpoch(losses: ArrayLike<number>): this {
        if (this.finalized) throw new ShimError('writer already finalized');
        if (losses.length !== this.sampleCount) {
            throw new ShimError(
                `length mismatch: got ${losses.length} losses for ${this.sampleCount} samples`,
            );
        }
        const snap = this.dtype === 'f32'
            ? new Float32Array(this.sampleCount)
            : new Float64Array(this.sampleCount);
        for (let i = 0; i < this.sampleCount; i++) {
            const v = losses[i];
            if (typeof v !== 'number' || !Number.isFinite(v)) {
                throw new ShimError(`non-finite loss at index ${i}`);
            }
            snap[i] = v; // round-to-nearest narrowing when dtype is f32
            if (!Number.isFinite(snap[i])) {
                throw new ShimError(`loss ${v} at index ${i} overflows ${this.dtype}`);
            }
        }
        this.snapshots.push(snap);
        return this;
    }

    /** Interleave the buffered snapshots sample-major, back-patch the
     * snapshot count, append the checksum, and close. */
    finalize(): string {
        if (this.finalized) throw new ShimError('writer already finalized');
        const s = this.snapshots.length;
        if (s < 2) throw new ShimError('at least 2 snapshots are required before finalize');
        const item = this.dtype === 'f32' ? 4 : 8;
        const losses = Buffer.alloc(this.sampleCount * s * item);
        for (let t = 0; t < s; t++) {
            const snap = this.snapshots[t];
            for (let i = 0; i < this.sampleCount; i++) {
                const off = (i * s + t) * item;
                if (item === 4) losses.writeFloatLE(snap[i], off);
                else losses.writeDoubleLE(snap[i], off);
            }
        }
        this.prefix.writeUInt32LE(s, SNAPSHOT_COUNT_OFFSET);
        const trailer = Buffer.alloc(4);
        trailer.writeUInt32LE(crc32(Buffer.concat([this.prefix, losses])) >>> 0, 0);
        writeSync(this.fd, this.prefix, SNAPSHOT_COUNT_OFFSET, 4, SNAPSHOT_COUNT_OFFSET);
        writeSync(this.fd, losses, 0, losses.length, this.prefix.length);
        writeSync(this.fd, trailer, 0, 4, this.prefix.length + losses.length);
        closeSync(this.fd);
        this.finalized = true;
        return this.path;
    }
}

/** Open an LTRJ writer: header, ids, and labels hit the file immediately;
 * losses stream in via logEpoch and land at finalize. One writer per
 * file — concurrent appends are not supported. */
export function openWriter(
    path: string,
    sampleIds: ArrayLike<number | bigint>,
    labels: ArrayLike<number>,
    nClasses: number,
    opts: WriterOptions = {},
): ShimWriter {
    return new ShimWriter(path, sampleIds, labels, nClasses, opts);
}
