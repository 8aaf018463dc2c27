//! Layer → mini-SASS kernel compiler.
//!
//! Every kernel is straight-line: loops over taps and reduction indices are
//! fully unrolled, and index arithmetic (division by layer constants) uses
//! predicated subtract sequences. With no branches, a fault confined to one
//! thread can never make a warp diverge.
//!
//! Register allocation starts at R0 (the global thread id) and stays below
//! R16, so the hot registers are R0..R9.

use std::fmt::Write as _;

use crate::isa::{parse_kernel, Kernel};
use crate::simt::{execute_kernel, DeviceConfig, KernelStats, LaunchConfig, WriteHook};

use super::{CnnError, LayerKind, LayerSpec, Model, Shape, Tensor, LOG2_E_BITS};

pub const THREADS_PER_BLOCK: usize = 128;

/// A span of device memory, in 32-bit words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Region {
    pub offset: usize,
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    fn byte(&self) -> i64 {
        self.offset as i64 * 4
    }
}

/// Where a layer finds its operands. `zero_word` must hold `0.0`; padded
/// convolution taps read it instead of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerLayout {
    pub zero_word: usize,
    pub weights: Region,
    pub bias: Region,
    pub input: Region,
    pub output: Region,
    /// Softmax only: holds the exponentials between its two kernels.
    pub scratch: Region,
}

impl LayerLayout {
    /// A self-contained layout: zero word, weights, bias, input, output, scratch.
    pub fn standalone(layer: &LayerSpec, input: Shape) -> Result<LayerLayout, CnnError> {
        let out = layer.output_shape(input)?;
        let mut cursor = 1;
        let mut take = |len: usize| {
            let r = Region {
                offset: cursor,
                len,
            };
            cursor += len;
            r
        };
        let (nw, nb) = layer.parameter_counts(input);
        let weights = take(nw);
        let bias = take(nb);
        let input_r = take(input.len());
        let output = take(out.len());
        let scratch = take(if layer.kind == LayerKind::Softmax {
            out.len()
        } else {
            0
        });
        Ok(LayerLayout {
            zero_word: 0,
            weights,
            bias,
            input: input_r,
            output,
            scratch,
        })
    }

    /// Words a device needs to hold every region.
    pub fn words(&self) -> usize {
        [
            self.zero_word + 1,
            self.weights.end(),
            self.bias.end(),
            self.input.end(),
            self.output.end(),
            self.scratch.end(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchedKernel {
    pub kernel: Kernel,
    pub launch: LaunchConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLayer {
    pub kernels: Vec<LaunchedKernel>,
    pub layout: LayerLayout,
    pub output_shape: Shape,
}

impl CompiledLayer {
    /// Writes the layer's parameters into `memory` at their layout regions.
    pub fn load_parameters(&self, layer: &LayerSpec, memory: &mut [u32]) {
        let l = &self.layout;
        fill(memory, l.weights, &layer.weights);
        fill(memory, l.bias, &layer.bias);
        memory[l.zero_word] = 0;
    }
}

fn fill(memory: &mut [u32], r: Region, values: &[f32]) {
    for (m, v) in memory[r.offset..r.end()].iter_mut().zip(values) {
        *m = v.to_bits();
    }
}

/// Compiles one layer against a self-contained [`LayerLayout::standalone`].
pub fn compile_layer(layer: &LayerSpec, input: Shape) -> Result<CompiledLayer, CnnError> {
    let layout = LayerLayout::standalone(layer, input)?;
    compile_layer_at(layer, input, &layout)
}

/// Compiles one layer reading and writing the regions of `layout`.
pub fn compile_layer_at(
    layer: &LayerSpec,
    input: Shape,
    layout: &LayerLayout,
) -> Result<CompiledLayer, CnnError> {
    let out = layer.output_shape(input)?;
    let (nw, nb) = layer.parameter_counts(input);
    if layer.weights.len() != nw || layer.bias.len() != nb {
        return Err(CnnError::UnsupportedShape(format!(
            "layer parameters ({}, {}) do not match ({nw}, {nb}) for input {input}",
            layer.weights.len(),
            layer.bias.len()
        )));
    }
    let check = |name: &str, r: Region, len: usize| {
        if r.len != len {
            Err(CnnError::UnsupportedShape(format!(
                "layout {name} region holds {} words, layer needs {len}",
                r.len
            )))
        } else {
            Ok(())
        }
    };
    check("input", layout.input, input.len())?;
    check("output", layout.output, out.len())?;
    check("weights", layout.weights, nw)?;
    check("bias", layout.bias, nb)?;
    let n = out.len();
    let kernels = match (layer.kind, input) {
        (
            LayerKind::Conv {
                kernel_size,
                stride,
                padding,
                ..
            },
            Shape::Chw(c, h, w),
        ) => {
            let Shape::Chw(oc, oh, ow) = out else {
                unreachable!("conv output is spatial")
            };
            let g = Conv {
                c,
                h,
                w,
                oc,
                oh,
                ow,
                k: kernel_size,
                s: stride,
                p: padding,
            };
            vec![g.emit("conv", layout)]
        }
        (LayerKind::MaxPool { size, stride }, Shape::Chw(_, h, w)) => {
            let Shape::Chw(oc, oh, ow) = out else {
                unreachable!("pool output is spatial")
            };
            vec![max_pool(n, (oc, oh, ow), (h, w), size, stride, layout)]
        }
        (LayerKind::Dense { .. }, _) => vec![dense(n, input.len(), layout)],
        (LayerKind::Relu, _) => vec![relu(n, layout)],
        (LayerKind::Softmax, _) => {
            check("scratch", layout.scratch, n)?;
            vec![softmax_exp(n, layout), softmax_norm(n, layout)]
        }
        (LayerKind::Conv { .. } | LayerKind::MaxPool { .. }, Shape::Flat(_)) => {
            return Err(CnnError::UnsupportedShape(format!(
                "spatial layer on flat input {input}"
            )))
        }
    };
    Ok(CompiledLayer {
        kernels: kernels.into_iter().collect::<Result<_, _>>()?,
        layout: *layout,
        output_shape: out,
    })
}

/// Assembly text builder.
struct Asm {
    text: String,
    n: usize,
    launch: LaunchConfig,
}

fn hex(v: i64) -> String {
    format!("0x{:X}", v as u32)
}

fn mem(reg: &str, off: i64) -> String {
    if off < 0 {
        format!("[{reg}-{}]", -off)
    } else {
        format!("[{reg}+{off}]")
    }
}

impl Asm {
    /// Kernel prologue: `R0` = global thread id, with a bounds exit when the
    /// grid overshoots `n`.
    fn new(name: &str, n: usize) -> Asm {
        let tpb = n.clamp(1, THREADS_PER_BLOCK);
        let launch = LaunchConfig {
            grid_blocks: n.div_ceil(tpb).max(1),
            threads_per_block: tpb,
        };
        let mut a = Asm {
            text: String::new(),
            n,
            launch,
        };
        a.line(&format!(".kernel {name}"));
        a.line("IMAD R0, %ctaid.x, %ntid.x, %tid.x");
        if launch.total_threads() > n {
            a.line(&format!("ISETP.GE.U32 P0, R0, {}", hex(n as i64)));
            a.line("@P0 EXIT");
        }
        a
    }

    fn line(&mut self, s: &str) {
        self.text.push_str(s);
        self.text.push('\n');
    }

    fn op(&mut self, args: std::fmt::Arguments<'_>) {
        self.text.write_fmt(args).expect("string write");
        self.text.push('\n');
    }

    /// `q = src / d`, `r = src % d`, assuming `src < (max_q + 1) * d`.
    fn divmod(&mut self, src: &str, d: usize, max_q: usize, q: &str, r: &str) {
        self.op(format_args!("MOVI {q}, 0x0"));
        self.op(format_args!("MOV {r}, {src}"));
        for _ in 0..max_q {
            self.op(format_args!("ISETP.GE.U32 P1, {r}, {}", hex(d as i64)));
            self.op(format_args!("@P1 ISUB {r}, {r}, {}", hex(d as i64)));
            self.op(format_args!("@P1 IADD {q}, {q}, 0x1"));
        }
    }

    /// Stores `value` to `out[gid]` and exits.
    fn finish(mut self, value: &str, out: Region) -> Result<LaunchedKernel, CnnError> {
        debug_assert!(self.n > 0);
        self.line("SHL R9, R0, 0x2");
        let st = mem("R9", out.byte());
        self.op(format_args!("ST {st}, {value}"));
        self.line("EXIT");
        let kernel = parse_kernel(&self.text).map_err(|e| {
            CnnError::Format(format!("generated kernel failed to assemble: {e}"))
        })?;
        Ok(LaunchedKernel {
            kernel,
            launch: self.launch,
        })
    }
}

struct Conv {
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Conv {
    // R0 gid, R1 oc, R2 spatial index, R3 oy, R4 ox, R5 acc,
    // R6 input window byte offset, R7 filter byte offset, R9/R11 operands,
    // R12/R14 padded coordinates, R15 tap address.
    fn emit(&self, name: &str, l: &LayerLayout) -> Result<LaunchedKernel, CnnError> {
        let (c, h, w, k, s, p) = (self.c, self.h, self.w, self.k, self.s, self.p);
        let mut a = Asm::new(name, self.oc * self.oh * self.ow);
        a.divmod("R0", self.oh * self.ow, self.oc - 1, "R1", "R2");
        a.divmod("R2", self.ow, self.oh - 1, "R3", "R4");
        a.line("SHL R9, R1, 0x2");
        let b = mem("R9", l.bias.byte());
        a.op(format_args!("LD R5, {b}"));
        a.op(format_args!("IMUL R6, R3, {}", hex((s * w) as i64)));
        a.op(format_args!("IMAD R6, R4, {}, R6", hex(s as i64)));
        a.line("SHL R6, R6, 0x2");
        a.op(format_args!("IMUL R7, R1, {}", hex((c * k * k * 4) as i64)));
        let (h, w, k, s, p) = (h as i64, w as i64, k as i64, s as i64, p as i64);
        let (oh, ow) = (self.oh as i64, self.ow as i64);
        for ic in 0..c as i64 {
            for ky in 0..k {
                let dy = ky - p;
                // can this row fall outside the input for some oy?
                let row_pad = dy < 0 || (oh - 1) * s + dy >= h;
                for kx in 0..k {
                    let dx = kx - p;
                    let col_pad = dx < 0 || (ow - 1) * s + dx >= w;
                    let off = 4 * (ic * h * w + dy * w + dx);
                    if row_pad || col_pad {
                        if row_pad {
                            a.op(format_args!("IMAD R12, R3, {}, {}", hex(s), hex(dy)));
                            a.op(format_args!("ISETP.GE.U32 P2, R12, {}", hex(h)));
                        }
                        if col_pad {
                            a.op(format_args!("IMAD R14, R4, {}, {}", hex(s), hex(dx)));
                            a.op(format_args!("ISETP.GE.U32 P3, R14, {}", hex(w)));
                        }
                        a.line("MOV R15, R6");
                        // redirect the load to the zero word
                        let zero = l.zero_word as i64 * 4 - l.input.byte() - off;
                        if row_pad {
                            a.op(format_args!("@P2 MOVI R15, {}", hex(zero)));
                        }
                        if col_pad {
                            a.op(format_args!("@P3 MOVI R15, {}", hex(zero)));
                        }
                        let x = mem("R15", l.input.byte() + off);
                        a.op(format_args!("LD R9, {x}"));
                    } else {
                        let x = mem("R6", l.input.byte() + off);
                        a.op(format_args!("LD R9, {x}"));
                    }
                    let wt = mem("R7", l.weights.byte() + 4 * (ic * k * k + ky * k + kx));
                    a.op(format_args!("LD R11, {wt}"));
                    a.line("FFMA R5, R9, R11, R5");
                }
            }
        }
        a.finish("R5", l.output)
    }
}

fn max_pool(
    n: usize,
    (c, oh, ow): (usize, usize, usize),
    (h, w): (usize, usize),
    size: usize,
    s: usize,
    l: &LayerLayout,
) -> Result<LaunchedKernel, CnnError> {
    let mut a = Asm::new("max_pool", n);
    a.divmod("R0", oh * ow, c - 1, "R1", "R2");
    a.divmod("R2", ow, oh - 1, "R3", "R4");
    a.op(format_args!("IMUL R5, R1, {}", hex((h * w) as i64)));
    a.op(format_args!("IMAD R5, R3, {}, R5", hex((s * w) as i64)));
    a.op(format_args!("IMAD R5, R4, {}, R5", hex(s as i64)));
    a.line("SHL R5, R5, 0x2");
    for ky in 0..size {
        for kx in 0..size {
            let x = mem("R5", l.input.byte() + 4 * (ky * w + kx) as i64);
            if ky == 0 && kx == 0 {
                a.op(format_args!("LD R6, {x}"));
            } else {
                a.op(format_args!("LD R7, {x}"));
                a.line("FMAX R6, R6, R7");
            }
        }
    }
    a.finish("R6", l.output)
}

// R0 gid, R2 acc, R3 weight-row byte offset, R4 zero base, R5/R6 operands.
fn dense(n: usize, inputs: usize, l: &LayerLayout) -> Result<LaunchedKernel, CnnError> {
    let mut a = Asm::new("dense", n);
    a.line("SHL R9, R0, 0x2");
    let b = mem("R9", l.bias.byte());
    a.op(format_args!("LD R2, {b}"));
    a.op(format_args!("IMUL R3, R0, {}", hex((inputs * 4) as i64)));
    a.line("MOVI R4, 0x0");
    for i in 0..inputs as i64 {
        let x = mem("R4", l.input.byte() + 4 * i);
        let wt = mem("R3", l.weights.byte() + 4 * i);
        a.op(format_args!("LD R5, {x}"));
        a.op(format_args!("LD R6, {wt}"));
        a.line("FFMA R2, R5, R6, R2");
    }
    a.finish("R2", l.output)
}

fn relu(n: usize, l: &LayerLayout) -> Result<LaunchedKernel, CnnError> {
    let mut a = Asm::new("relu", n);
    a.line("SHL R1, R0, 0x2");
    let x = mem("R1", l.input.byte());
    a.op(format_args!("LD R2, {x}"));
    a.line("FMAX R2, R2, 0x0");
    let st = mem("R1", l.output.byte());
    a.op(format_args!("ST {st}, R2"));
    a.line("EXIT");
    let kernel = parse_kernel(&a.text)
        .map_err(|e| CnnError::Format(format!("generated kernel failed to assemble: {e}")))?;
    Ok(LaunchedKernel {
        kernel,
        launch: a.launch,
    })
}

/// `scratch[i] = exp2((x[i] - max(x)) * log2(e))`.
// R0 gid, R1 byte index, R2 running max, R3 operand, R4 zero base.
fn softmax_exp(n: usize, l: &LayerLayout) -> Result<LaunchedKernel, CnnError> {
    let mut a = Asm::new("softmax_exp", n);
    a.line("MOVI R4, 0x0");
    let x0 = mem("R4", l.input.byte());
    a.op(format_args!("LD R2, {x0}"));
    for j in 1..n as i64 {
        let x = mem("R4", l.input.byte() + 4 * j);
        a.op(format_args!("LD R3, {x}"));
        a.line("FMAX R2, R2, R3");
    }
    a.op(format_args!("FMUL R2, R2, {}", hex((-1.0f32).to_bits() as i64)));
    a.line("SHL R1, R0, 0x2");
    let xi = mem("R1", l.input.byte());
    a.op(format_args!("LD R3, {xi}"));
    a.line("FADD R3, R3, R2");
    a.op(format_args!("FMUL R3, R3, {}", hex(LOG2_E_BITS as i64)));
    a.line("FEXP2 R3, R3");
    let st = mem("R1", l.scratch.byte());
    a.op(format_args!("ST {st}, R3"));
    a.line("EXIT");
    let kernel = parse_kernel(&a.text)
        .map_err(|e| CnnError::Format(format!("generated kernel failed to assemble: {e}")))?;
    Ok(LaunchedKernel {
        kernel,
        launch: a.launch,
    })
}

/// `out[i] = scratch[i] * rcp(sum(scratch))`, summed in ascending order.
// R0 gid, R1 byte index, R2 sum then reciprocal, R3 operand, R4 zero base.
fn softmax_norm(n: usize, l: &LayerLayout) -> Result<LaunchedKernel, CnnError> {
    let mut a = Asm::new("softmax_norm", n);
    a.line("MOVI R4, 0x0");
    a.line("MOVI R2, 0x0");
    for j in 0..n as i64 {
        let e = mem("R4", l.scratch.byte() + 4 * j);
        a.op(format_args!("LD R3, {e}"));
        a.line("FADD R2, R2, R3");
    }
    a.line("FRCP R2, R2");
    a.line("SHL R1, R0, 0x2");
    let ei = mem("R1", l.scratch.byte());
    a.op(format_args!("LD R3, {ei}"));
    a.line("FMUL R3, R3, R2");
    let st = mem("R1", l.output.byte());
    a.op(format_args!("ST {st}, R3"));
    a.line("EXIT");
    let kernel = parse_kernel(&a.text)
        .map_err(|e| CnnError::Format(format!("generated kernel failed to assemble: {e}")))?;
    Ok(LaunchedKernel {
        kernel,
        launch: a.launch,
    })
}

/// A whole model laid out in one device memory image.
///
/// Memory plan: word 0 is the zero word, then every layer's weights and
/// biases, then the input image, then each layer's output (softmax scratch
/// follows its output).
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    pub layers: Vec<CompiledLayer>,
    pub input: Region,
    pub input_shape: Shape,
    pub output: Region,
    /// Memory image with parameters loaded and the input region zeroed.
    pub base_image: Vec<u32>,
}

/// Result of one simulated inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Tensor,
    /// Statistics folded over every kernel launch.
    pub stats: KernelStats,
    /// Warp-level instructions issued by each kernel, in launch order.
    pub kernel_instructions: Vec<u64>,
}

impl CompiledModel {
    pub fn compile(model: &Model) -> Result<CompiledModel, CnnError> {
        let shapes = model.shapes()?;
        let mut cursor = 1usize;
        let mut take = |len: usize| {
            let r = Region {
                offset: cursor,
                len,
            };
            cursor += len;
            r
        };
        let params: Vec<(Region, Region)> = model
            .layers
            .iter()
            .map(|l| (take(l.weights.len()), take(l.bias.len())))
            .collect();
        let input = take(model.input_shape.len());
        let mut prev = input;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let out_len = shapes[i + 1].len();
            let output = take(out_len);
            let scratch = if layer.kind == LayerKind::Softmax {
                take(out_len)
            } else {
                Region {
                    offset: output.end(),
                    len: 0,
                }
            };
            let layout = LayerLayout {
                zero_word: 0,
                weights: params[i].0,
                bias: params[i].1,
                input: prev,
                output,
                scratch,
            };
            layers.push(compile_layer_at(layer, shapes[i], &layout)?);
            prev = output;
        }
        let mut base_image = vec![0u32; cursor];
        for (cl, spec) in layers.iter().zip(&model.layers) {
            cl.load_parameters(spec, &mut base_image);
        }
        Ok(CompiledModel {
            layers,
            input,
            input_shape: model.input_shape,
            output: prev,
            base_image,
        })
    }

    /// Words of device memory the model needs.
    pub fn memory_words(&self) -> usize {
        self.base_image.len()
    }

    pub fn kernel_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernels.len()).sum()
    }

    /// Runs every kernel in layer order on one fresh memory image, with the
    /// same hook installed for all of them.
    pub fn infer(
        &self,
        image: &Tensor,
        device: &DeviceConfig,
        mut hook: Option<&mut dyn WriteHook>,
    ) -> Result<Inference, CnnError> {
        if image.shape != self.input_shape || image.data.len() != self.input.len {
            return Err(CnnError::Format(format!(
                "image shape {} does not match model input {}",
                image.shape, self.input_shape
            )));
        }
        if device.global_mem_words < self.memory_words() {
            return Err(CnnError::Format(format!(
                "device has {} words of memory, model needs {}",
                device.global_mem_words,
                self.memory_words()
            )));
        }
        let mut memory = self.base_image.clone();
        memory.resize(device.global_mem_words, 0);
        fill(&mut memory, self.input, &image.data);
        let mut stats = KernelStats::new(device.regs_per_thread);
        let mut kernel_instructions = Vec::with_capacity(self.kernel_count());
        for lk in self.layers.iter().flat_map(|l| &l.kernels) {
            let h: Option<&mut dyn WriteHook> = match hook {
                Some(ref mut h) => Some(&mut **h),
                None => None,
            };
            let s = execute_kernel(&lk.kernel, &lk.launch, device, &mut memory, h)?;
            kernel_instructions.push(s.instructions_executed);
            stats.accumulate(&s);
        }
        let data = memory[self.output.offset..self.output.end()]
            .iter()
            .map(|b| f32::from_bits(*b))
            .collect();
        Ok(Inference {
            probs: Tensor {
                shape: Shape::Flat(self.output.len),
                data,
            },
            stats,
            kernel_instructions,
        })
    }
}

/// Compiles `model` and runs one inference.
pub fn infer(
    model: &Model,
    image: &Tensor,
    device: &DeviceConfig,
    hook: Option<&mut dyn WriteHook>,
) -> Result<Tensor, CnnError> {
    Ok(CompiledModel::compile(model)?
        .infer(image, device, hook)?
        .probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{emit_text, validate_kernel, Opcode};

    pub(crate) fn device(words: usize) -> DeviceConfig {
        DeviceConfig {
            num_sms: 2,
            max_resident_warps_per_sm: 16,
            warp_size: 32,
            regs_per_thread: 32,
            global_mem_words: words,
            instr_budget: 10_000_000,
        }
    }

    /// Runs a single compiled layer on `input`, returning its output region.
    fn run_layer(layer: &LayerSpec, input: &Tensor) -> Vec<f32> {
        let cl = compile_layer(layer, input.shape).unwrap();
        let mut mem = vec![0u32; cl.layout.words()];
        cl.load_parameters(layer, &mut mem);
        fill(&mut mem, cl.layout.input, &input.data);
        let dev = device(mem.len());
        for lk in &cl.kernels {
            assert!(validate_kernel(&lk.kernel).is_empty());
            execute_kernel(&lk.kernel, &lk.launch, &dev, &mut mem, None).unwrap();
        }
        let o = cl.layout.output;
        mem[o.offset..o.end()].iter().map(|b| f32::from_bits(*b)).collect()
    }

    fn conv(oc: usize, ic: usize, k: usize, s: usize, p: usize, seed: u32) -> LayerSpec {
        let mut x = seed;
        let mut next = move || {
            x = x.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            ((x >> 8) % 2000) as f32 / 1000.0 - 1.0
        };
        LayerSpec {
            kind: LayerKind::Conv {
                out_channels: oc,
                kernel_size: k,
                stride: s,
                padding: p,
            },
            weights: (0..oc * ic * k * k).map(|_| next()).collect(),
            bias: (0..oc).map(|_| next()).collect(),
        }
    }

    #[test]
    fn relu_kernel_is_small() {
        let cl = compile_layer(&LayerSpec::relu(), Shape::Chw(1, 4, 4)).unwrap();
        assert_eq!(cl.kernels.len(), 1);
        let lk = &cl.kernels[0];
        assert!(lk.kernel.instructions.len() <= 8);
        assert_eq!(lk.launch.grid_blocks, 1);
        assert_eq!(lk.launch.total_threads(), 16);
        let input = Tensor::new(
            Shape::Chw(1, 4, 4),
            (0..16).map(|i| i as f32 - 8.0).collect(),
        )
        .unwrap();
        let out = run_layer(&LayerSpec::relu(), &input);
        assert_eq!(out, input.data.iter().map(|x| x.max(0.0)).collect::<Vec<_>>());
    }

    #[test]
    fn identity_conv_echoes_input() {
        let layer = LayerSpec {
            kind: LayerKind::Conv {
                out_channels: 1,
                kernel_size: 1,
                stride: 1,
                padding: 0,
            },
            weights: vec![1.0],
            bias: vec![0.0],
        };
        let input = Tensor::new(
            Shape::Chw(1, 3, 5),
            (0..15).map(|i| (i as f32).sin()).collect(),
        )
        .unwrap();
        let out = run_layer(&layer, &input);
        assert_eq!(
            out.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            input.bits()
        );
    }

    #[test]
    fn max_pool_2x2() {
        let input = Tensor::new(Shape::Chw(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(run_layer(&LayerSpec::max_pool(2, 2), &input), vec![4.0]);
    }

    #[test]
    fn layers_match_reference() {
        let cases: Vec<(LayerSpec, Shape)> = vec![
            (conv(3, 2, 3, 1, 0, 1), Shape::Chw(2, 8, 8)),
            (conv(2, 1, 3, 2, 1, 2), Shape::Chw(1, 7, 6)),
            (conv(4, 2, 5, 1, 2, 3), Shape::Chw(2, 8, 8)),
            (LayerSpec::max_pool(3, 2), Shape::Chw(2, 7, 7)),
            (
                LayerSpec {
                    kind: LayerKind::Dense { out_features: 5 },
                    weights: (0..60).map(|i| (i as f32 * 0.37).cos()).collect(),
                    bias: vec![0.5, -0.5, 0.25, 0.0, 1.0],
                },
                Shape::Chw(3, 2, 2),
            ),
            (LayerSpec::softmax(), Shape::Flat(10)),
            (LayerSpec::relu(), Shape::Flat(300)),
        ];
        for (layer, shape) in cases {
            let input = Tensor::new(
                shape,
                (0..shape.len()).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect(),
            )
            .unwrap();
            let got = run_layer(&layer, &input);
            let want = super::super::reference_layer(&layer, &input).unwrap();
            assert_eq!(
                got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                want.bits(),
                "{:?}",
                layer.kind
            );
        }
    }

    #[test]
    fn generated_kernels_roundtrip_and_are_branch_free() {
        let layers = [
            (conv(4, 1, 5, 1, 0, 4), Shape::Chw(1, 8, 8)),
            (conv(2, 2, 3, 1, 1, 5), Shape::Chw(2, 5, 5)),
            (LayerSpec::softmax(), Shape::Flat(10)),
        ];
        for (layer, shape) in layers {
            for lk in compile_layer(&layer, shape).unwrap().kernels {
                assert_eq!(parse_kernel(&emit_text(&lk.kernel)).unwrap(), lk.kernel);
                assert!(lk
                    .kernel
                    .instructions
                    .iter()
                    .all(|i| i.opcode != Opcode::Bra));
                assert!(lk.kernel.max_register().unwrap().index() < 16);
            }
        }
    }

    #[test]
    fn bounds_guard_only_when_grid_overshoots() {
        let exact = compile_layer(&LayerSpec::relu(), Shape::Flat(256)).unwrap();
        assert_eq!(exact.kernels[0].launch.grid_blocks, 2);
        assert!(!exact.kernels[0]
            .kernel
            .instructions
            .iter()
            .any(|i| i.opcode == Opcode::Isetp));
        let ragged = compile_layer(&LayerSpec::relu(), Shape::Flat(130)).unwrap();
        assert_eq!(ragged.kernels[0].launch.grid_blocks, 2);
        assert_eq!(ragged.kernels[0].kernel.instructions[1].opcode, Opcode::Isetp);
        let input = Tensor::new(Shape::Flat(130), vec![-1.0; 130]).unwrap();
        assert_eq!(run_layer(&LayerSpec::relu(), &input), vec![0.0; 130]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let layer = LayerSpec::relu();
        let mut layout = LayerLayout::standalone(&layer, Shape::Flat(4)).unwrap();
        layout.output.len = 3;
        assert!(matches!(
            compile_layer_at(&layer, Shape::Flat(4), &layout),
            Err(CnnError::UnsupportedShape(_))
        ));
    }
}
