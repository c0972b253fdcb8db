export { openWriter, ShimError, ShimWriter } from './writer.js';
export type { Dtype, WriterOptions } from './writer.js';
