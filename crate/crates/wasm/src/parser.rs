//! Binary format decoder for the supported MVP subset.

use std::collections::BTreeMap;

use crate::error::ParseError;
use crate::instr::{BlockType, Instr, LoadKind, MemArg, NumOp, StoreKind};
use crate::types::*;

pub const MAGIC: [u8; 4] = *b"\0asm";
pub const VERSION: u32 = 1;

/// Upper bound on declared locals per function. Keeps a tiny binary from
/// forcing a huge allocation at call time.
pub const MAX_LOCALS: u32 = 50_000;

/// A function defined in the module.
#[derive(Clone, Debug, PartialEq)]
pub struct FuncBody {
    pub type_index: u32,
    /// Declared locals, excluding parameters.
    pub locals: Vec<ValType>,
    pub code: Vec<Instr>,
    /// Byte offset of each instruction within the module binary.
    pub offsets: Vec<u32>,
}

/// A decoded, not yet validated, module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WasmModule {
    pub types: Vec<FuncType>,
    pub imports: Vec<Import>,
    pub funcs: Vec<FuncBody>,
    pub tables: Vec<TableType>,
    pub memories: Vec<MemoryType>,
    pub globals: Vec<Global>,
    pub exports: BTreeMap<String, Export>,
    pub start: Option<u32>,
    pub elements: Vec<ElementSegment>,
    pub data: Vec<DataSegment>,
}

impl WasmModule {
    pub fn imported_funcs(&self) -> impl Iterator<Item = (&Import, u32)> {
        self.imports.iter().filter_map(|i| match i.kind {
            ImportKind::Func(t) => Some((i, t)),
            _ => None,
        })
    }

    pub fn num_imported_funcs(&self) -> u32 {
        self.imported_funcs().count() as u32
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Absolute offset of `bytes[0]` in the module.
    base: usize,
    section: u8,
}

type Result<T> = std::result::Result<T, ParseError>;

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: usize, section: u8) -> Self {
        Self {
            bytes,
            pos: 0,
            base,
            section,
        }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn err<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(ParseError::MalformedSection {
            section: self.section,
            offset: self.offset(),
            reason: reason.into(),
        })
    }

    fn eof(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn byte(&mut self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => self.err("unexpected end"),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.err("length out of bounds");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut result: u64 = 0;
        for i in 0..5 {
            let b = self.byte()?;
            if i == 4 && b & 0xF0 != 0 {
                return self.err("integer too large");
            }
            result |= ((b & 0x7F) as u64) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(result as u32);
            }
        }
        self.err("integer representation too long")
    }

    fn signed(&mut self, bits: u32) -> Result<i64> {
        let max_bytes = bits.div_ceil(7);
        let mut result: i64 = 0;
        let mut shift = 0u32;
        for i in 0..max_bytes {
            let b = self.byte()?;
            if i == max_bytes - 1 {
                // Unused bits of the last byte must be a sign extension.
                let used = bits - 7 * (max_bytes - 1);
                let rest = (b & 0x7F) >> (used - 1);
                let all_ones = 0x7Fu8 >> (used - 1);
                if b & 0x80 != 0 || (rest != 0 && rest != all_ones) {
                    return self.err("integer too large");
                }
            }
            result |= ((b & 0x7F) as i64) << shift;
            shift += 7;
            if b & 0x80 == 0 {
                if shift < 64 && b & 0x40 != 0 {
                    result |= -1i64 << shift;
                }
                return Ok(result);
            }
        }
        self.err("integer representation too long")
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(self.signed(32)? as i32)
    }

    fn i64(&mut self) -> Result<i64> {
        self.signed(64)
    }

    fn f32_bits(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_bits(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// Vector length, sanity-checked against remaining bytes so that a tiny
    /// input cannot request a huge allocation.
    fn count(&mut self) -> Result<u32> {
        let n = self.u32()?;
        if n as usize > self.bytes.len() - self.pos {
            return self.err("vector length exceeds section size");
        }
        Ok(n)
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_owned()),
            Err(_) => self.err("malformed UTF-8 name"),
        }
    }

    fn val_type(&mut self) -> Result<ValType> {
        let b = self.byte()?;
        decode_val_type(b).or_else(|e| match e {
            Some(e) => Err(e),
            None => self.err(format!("invalid value type {b:#x}")),
        })
    }

    fn limits(&mut self) -> Result<Limits> {
        match self.byte()? {
            0x00 => Ok(Limits {
                min: self.u32()?,
                max: None,
            }),
            0x01 => {
                let min = self.u32()?;
                let max = self.u32()?;
                Ok(Limits {
                    min,
                    max: Some(max),
                })
            }
            0x02 | 0x03 => Err(ParseError::UnsupportedFeature("threads")),
            0x04..=0x07 => Err(ParseError::UnsupportedFeature("memory64")),
            0x08..=0x0F => Err(ParseError::UnsupportedFeature("custom page size encoding")),
            b => self.err(format!("invalid limits flag {b:#x}")),
        }
    }

    fn table_type(&mut self) -> Result<TableType> {
        match self.byte()? {
            0x70 => {}
            0x6F => return Err(ParseError::UnsupportedFeature("reference types")),
            b => return self.err(format!("invalid element type {b:#x}")),
        }
        Ok(TableType {
            limits: self.limits()?,
        })
    }

    fn global_type(&mut self) -> Result<GlobalType> {
        let content = self.val_type()?;
        let mutable = match self.byte()? {
            0 => false,
            1 => true,
            _ => return self.err("invalid mutability"),
        };
        Ok(GlobalType { content, mutable })
    }

    fn const_expr(&mut self) -> Result<ConstExpr> {
        let op = self.byte()?;
        let expr = match op {
            0x41 => ConstExpr::I32(self.i32()?),
            0x42 => ConstExpr::I64(self.i64()?),
            0x43 => ConstExpr::F32(self.f32_bits()?),
            0x44 => ConstExpr::F64(self.f64_bits()?),
            0x23 => ConstExpr::GlobalGet(self.u32()?),
            0xD0 | 0xD2 => return Err(ParseError::UnsupportedFeature("reference types")),
            0xFD => return Err(ParseError::UnsupportedFeature("simd")),
            _ => return self.err("constant expression required"),
        };
        if self.byte()? != 0x0B {
            return self.err("constant expression required");
        }
        Ok(expr)
    }

    fn block_type(&mut self) -> Result<BlockType> {
        let Some(&b) = self.bytes.get(self.pos) else {
            return self.err("unexpected end");
        };
        if b == 0x40 {
            self.pos += 1;
            return Ok(None);
        }
        match decode_val_type(b) {
            Ok(t) => {
                self.pos += 1;
                Ok(Some(t))
            }
            Err(Some(e)) => Err(e),
            Err(None) => {
                // A type index: only meaningful with multi-value.
                let idx = self.signed(33)?;
                if idx >= 0 {
                    Err(ParseError::UnsupportedFeature("multi-value"))
                } else {
                    self.err("invalid block type")
                }
            }
        }
    }

    fn mem_arg(&mut self) -> Result<MemArg> {
        let align = self.u32()?;
        if align & 0x40 != 0 {
            return Err(ParseError::UnsupportedFeature("multi-memory"));
        }
        let offset = self.u32()?;
        Ok(MemArg { align, offset })
    }

    fn zero_byte(&mut self) -> Result<()> {
        if self.byte()? != 0 {
            return Err(ParseError::UnsupportedFeature("multi-memory"));
        }
        Ok(())
    }
}

/// `Err(None)` for a byte that is not a value type at all.
fn decode_val_type(b: u8) -> std::result::Result<ValType, Option<ParseError>> {
    match b {
        0x7F => Ok(ValType::I32),
        0x7E => Ok(ValType::I64),
        0x7D => Ok(ValType::F32),
        0x7C => Ok(ValType::F64),
        0x7B => Err(Some(ParseError::UnsupportedFeature("simd"))),
        0x70 | 0x6F => Err(Some(ParseError::UnsupportedFeature("reference types"))),
        0x63..=0x6E => Err(Some(ParseError::UnsupportedFeature("gc"))),
        _ => Err(None),
    }
}

/// Decode a module binary. Custom sections are skipped.
pub fn parse_module(bytes: &[u8]) -> Result<WasmModule> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(ParseError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(ParseError::BadVersion(0));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ParseError::BadVersion(version));
    }

    let mut module = WasmModule::default();
    let mut func_types: Vec<u32> = Vec::new();
    let mut saw_code = false;
    let mut last_id = 0u8;
    let mut top = Reader::new(&bytes[8..], 8, 0);

    while !top.eof() {
        let id = top.byte()?;
        top.section = id;
        let size = top.u32()? as usize;
        let start = top.offset();
        let payload = top.take(size)?;
        let mut r = Reader::new(payload, start, id);

        if id != 0 {
            if id <= last_id && !(id == 12 && last_id < 10) {
                return r.err("section out of order or duplicated");
            }
            last_id = id;
        }

        match id {
            0 => {
                // Custom section: the name must still be well-formed.
                r.name()?;
                continue;
            }
            1 => {
                for _ in 0..r.count()? {
                    if r.byte()? != 0x60 {
                        return r.err("expected function type");
                    }
                    let mut params = Vec::new();
                    for _ in 0..r.count()? {
                        params.push(r.val_type()?);
                    }
                    let n = r.count()?;
                    if n > 1 {
                        return Err(ParseError::UnsupportedFeature("multi-value"));
                    }
                    let mut results = Vec::new();
                    for _ in 0..n {
                        results.push(r.val_type()?);
                    }
                    module.types.push(FuncType { params, results });
                }
            }
            2 => {
                for _ in 0..r.count()? {
                    let module_name = r.name()?;
                    let field = r.name()?;
                    let kind = match r.byte()? {
                        0x00 => ImportKind::Func(r.u32()?),
                        0x01 => ImportKind::Table(r.table_type()?),
                        0x02 => ImportKind::Memory(MemoryType {
                            limits: r.limits()?,
                        }),
                        0x03 => ImportKind::Global(r.global_type()?),
                        0x04 => return Err(ParseError::UnsupportedFeature("exceptions")),
                        b => return r.err(format!("invalid import kind {b:#x}")),
                    };
                    module.imports.push(Import {
                        module: module_name,
                        field,
                        kind,
                    });
                }
            }
            3 => {
                for _ in 0..r.count()? {
                    func_types.push(r.u32()?);
                }
            }
            4 => {
                for _ in 0..r.count()? {
                    module.tables.push(r.table_type()?);
                }
            }
            5 => {
                for _ in 0..r.count()? {
                    module.memories.push(MemoryType { limits: r.limits()? });
                }
            }
            6 => {
                for _ in 0..r.count()? {
                    let ty = r.global_type()?;
                    let init = r.const_expr()?;
                    module.globals.push(Global { ty, init });
                }
            }
            7 => {
                for _ in 0..r.count()? {
                    let name = r.name()?;
                    let kind = match r.byte()? {
                        0x00 => ExportKind::Func,
                        0x01 => ExportKind::Table,
                        0x02 => ExportKind::Memory,
                        0x03 => ExportKind::Global,
                        0x04 => return Err(ParseError::UnsupportedFeature("exceptions")),
                        b => return r.err(format!("invalid export kind {b:#x}")),
                    };
                    let index = r.u32()?;
                    if module.exports.insert(name, Export { kind, index }).is_some() {
                        return r.err("duplicate export name");
                    }
                }
            }
            8 => module.start = Some(r.u32()?),
            9 => {
                for _ in 0..r.count()? {
                    match r.u32()? {
                        0 => {}
                        1..=7 => return Err(ParseError::UnsupportedFeature("bulk memory")),
                        _ => return r.err("invalid element segment flags"),
                    }
                    let offset = r.const_expr()?;
                    let mut funcs = Vec::new();
                    for _ in 0..r.count()? {
                        funcs.push(r.u32()?);
                    }
                    module.elements.push(ElementSegment {
                        table: 0,
                        offset,
                        funcs,
                    });
                }
            }
            10 => {
                saw_code = true;
                let n = r.count()?;
                if n as usize != func_types.len() {
                    return r.err("function and code section have inconsistent lengths");
                }
                for &ty in &func_types {
                    let size = r.u32()? as usize;
                    let body_start = r.offset();
                    let body = r.take(size)?;
                    let mut br = Reader::new(body, body_start, 10);
                    module.funcs.push(parse_body(&mut br, ty)?);
                }
            }
            11 => {
                for _ in 0..r.count()? {
                    match r.u32()? {
                        0 => {}
                        1 | 2 => return Err(ParseError::UnsupportedFeature("bulk memory")),
                        _ => return r.err("invalid data segment flags"),
                    }
                    let offset = r.const_expr()?;
                    let len = r.u32()? as usize;
                    let bytes = r.take(len)?.to_vec();
                    module.data.push(DataSegment {
                        memory: 0,
                        offset,
                        bytes,
                    });
                }
            }
            12 => return Err(ParseError::UnsupportedFeature("bulk memory")),
            13 => return Err(ParseError::UnsupportedFeature("exceptions")),
            _ => return r.err(format!("unknown section id {id}")),
        }
        if !r.eof() {
            return r.err("section size mismatch");
        }
    }

    if !saw_code && !func_types.is_empty() {
        return Err(ParseError::MalformedSection {
            section: 10,
            offset: bytes.len(),
            reason: "function and code section have inconsistent lengths".into(),
        });
    }
    Ok(module)
}

fn parse_body(r: &mut Reader<'_>, type_index: u32) -> Result<FuncBody> {
    let mut locals = Vec::new();
    let mut total: u32 = 0;
    for _ in 0..r.u32()? {
        let n = r.u32()?;
        let t = r.val_type()?;
        total = match total.checked_add(n) {
            Some(t) if t <= MAX_LOCALS => t,
            _ => return r.err("too many locals"),
        };
        locals.extend(std::iter::repeat_n(t, n as usize));
    }

    let mut code = Vec::new();
    let mut offsets = Vec::new();
    let mut depth: u32 = 1;
    loop {
        if r.eof() {
            return r.err("function body must end with `end`");
        }
        let offset = r.offset() as u32;
        let op = r.byte()?;
        let instr = match op {
            0x00 => Instr::Unreachable,
            0x01 => Instr::Nop,
            0x02 => {
                depth += 1;
                Instr::Block(r.block_type()?)
            }
            0x03 => {
                depth += 1;
                Instr::Loop(r.block_type()?)
            }
            0x04 => {
                depth += 1;
                Instr::If(r.block_type()?)
            }
            0x05 => Instr::Else,
            0x06..=0x0A | 0x18 | 0x19 | 0x1F => {
                return Err(ParseError::UnsupportedFeature("exceptions"))
            }
            0x0B => {
                depth -= 1;
                Instr::End
            }
            0x0C => Instr::Br(r.u32()?),
            0x0D => Instr::BrIf(r.u32()?),
            0x0E => {
                let n = r.count()?;
                let mut labels = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    labels.push(r.u32()?);
                }
                Instr::BrTable {
                    labels: labels.into_boxed_slice(),
                    default: r.u32()?,
                }
            }
            0x0F => Instr::Return,
            0x10 => Instr::Call(r.u32()?),
            0x11 => {
                let t = r.u32()?;
                if r.byte()? != 0 {
                    return Err(ParseError::UnsupportedFeature("reference types"));
                }
                Instr::CallIndirect(t)
            }
            0x12 | 0x13 => return Err(ParseError::UnsupportedFeature("tail calls")),
            0x14 | 0x15 => return Err(ParseError::UnsupportedFeature("function references")),
            0x1A => Instr::Drop,
            0x1B => Instr::Select,
            0x1C => return Err(ParseError::UnsupportedFeature("reference types")),
            0x20 => Instr::LocalGet(r.u32()?),
            0x21 => Instr::LocalSet(r.u32()?),
            0x22 => Instr::LocalTee(r.u32()?),
            0x23 => Instr::GlobalGet(r.u32()?),
            0x24 => Instr::GlobalSet(r.u32()?),
            0x25 | 0x26 => return Err(ParseError::UnsupportedFeature("reference types")),
            0x28..=0x35 => {
                let kind = match op {
                    0x28 => LoadKind::I32,
                    0x29 => LoadKind::I64,
                    0x2A => LoadKind::F32,
                    0x2B => LoadKind::F64,
                    0x2C => LoadKind::I32S8,
                    0x2D => LoadKind::I32U8,
                    0x2E => LoadKind::I32S16,
                    0x2F => LoadKind::I32U16,
                    0x30 => LoadKind::I64S8,
                    0x31 => LoadKind::I64U8,
                    0x32 => LoadKind::I64S16,
                    0x33 => LoadKind::I64U16,
                    0x34 => LoadKind::I64S32,
                    _ => LoadKind::I64U32,
                };
                Instr::Load(kind, r.mem_arg()?)
            }
            0x36..=0x3E => {
                let kind = match op {
                    0x36 => StoreKind::I32,
                    0x37 => StoreKind::I64,
                    0x38 => StoreKind::F32,
                    0x39 => StoreKind::F64,
                    0x3A => StoreKind::I32As8,
                    0x3B => StoreKind::I32As16,
                    0x3C => StoreKind::I64As8,
                    0x3D => StoreKind::I64As16,
                    _ => StoreKind::I64As32,
                };
                Instr::Store(kind, r.mem_arg()?)
            }
            0x3F => {
                r.zero_byte()?;
                Instr::MemorySize
            }
            0x40 => {
                r.zero_byte()?;
                Instr::MemoryGrow
            }
            0x41 => Instr::I32Const(r.i32()?),
            0x42 => Instr::I64Const(r.i64()?),
            0x43 => Instr::F32Const(r.f32_bits()?),
            0x44 => Instr::F64Const(r.f64_bits()?),
            0x45..=0xC4 => Instr::Num(NumOp::from_code(op as u16).expect("contiguous opcode range")),
            0xD0..=0xD6 => return Err(ParseError::UnsupportedFeature("reference types")),
            0xFB => return Err(ParseError::UnsupportedFeature("gc")),
            0xFC => {
                let sub = r.u32()?;
                match sub {
                    0..=7 => Instr::Num(NumOp::from_code(0xFC00 | sub as u16).unwrap()),
                    8..=17 => return Err(ParseError::UnsupportedFeature("bulk memory")),
                    _ => return r.err(format!("unknown 0xFC subopcode {sub}")),
                }
            }
            0xFD => return Err(ParseError::UnsupportedFeature("simd")),
            0xFE => return Err(ParseError::UnsupportedFeature("threads")),
            _ => return r.err(format!("illegal opcode {op:#x}")),
        };
        code.push(instr);
        offsets.push(offset);
        if depth == 0 {
            break;
        }
    }
    if !r.eof() {
        return r.err("trailing bytes after function end");
    }
    Ok(FuncBody {
        type_index,
        locals,
        code,
        offsets,
    })
}
