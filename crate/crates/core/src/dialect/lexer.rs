//! Byte classification for brace-delimited test dialects.
//!
//! Marks every byte of a source text as code or non-code (comment, string or
//! char literal) so that brace matching and keyword search only ever look at
//! code. String templates (`"${expr}"`) are treated as code inside the
//! template braces.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ByteClass {
    Code,
    Comment,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    /// Code nested inside a `${ ... }` template; the counter tracks braces
    /// opened inside the template expression.
    Template(u32),
    Str,
    RawStr,
}

pub(crate) fn classify(text: &str) -> Vec<ByteClass> {
    let bytes = text.as_bytes();
    let mut classes = vec![ByteClass::Code; bytes.len()];
    let mut stack: Vec<Frame> = Vec::new();
    let mut i = 0;

    while i < bytes.len() {
        match stack.last().copied() {
            Some(Frame::Str) | Some(Frame::RawStr) => {
                let raw = stack.last() == Some(&Frame::RawStr);
                if !raw && bytes[i] == b'\\' {
                    let end = (i + 2).min(bytes.len());
                    mark(&mut classes, i, end, ByteClass::Literal);
                    i = end;
                } else if bytes[i] == b'$' && bytes.get(i + 1) == Some(&b'{') {
                    mark(&mut classes, i, i + 1, ByteClass::Literal);
                    // The template's opening brace is code and balances the
                    // closing brace that ends the template.
                    stack.push(Frame::Template(0));
                    i += 2;
                } else if raw && bytes[i..].starts_with(b"\"\"\"") {
                    // Kotlin allows extra quotes before the closing triple.
                    let mut end = i + 3;
                    while bytes.get(end) == Some(&b'"') {
                        end += 1;
                    }
                    mark(&mut classes, i, end, ByteClass::Literal);
                    stack.pop();
                    i = end;
                } else if !raw && bytes[i] == b'"' {
                    classes[i] = ByteClass::Literal;
                    stack.pop();
                    i += 1;
                } else if !raw && bytes[i] == b'\n' {
                    // Unterminated single-line string: recover at end of line.
                    stack.pop();
                    i += 1;
                } else {
                    classes[i] = ByteClass::Literal;
                    i += 1;
                }
            }
            top => {
                let b = bytes[i];
                if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                    let end = bytes[i..]
                        .iter()
                        .position(|&c| c == b'\n')
                        .map_or(bytes.len(), |p| i + p);
                    mark(&mut classes, i, end, ByteClass::Comment);
                    i = end;
                } else if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
                    let end = block_comment_end(bytes, i);
                    mark(&mut classes, i, end, ByteClass::Comment);
                    i = end;
                } else if bytes[i..].starts_with(b"\"\"\"") {
                    mark(&mut classes, i, i + 3, ByteClass::Literal);
                    stack.push(Frame::RawStr);
                    i += 3;
                } else if b == b'"' {
                    classes[i] = ByteClass::Literal;
                    stack.push(Frame::Str);
                    i += 1;
                } else if b == b'\'' {
                    match char_literal_len(&bytes[i..]) {
                        Some(len) => {
                            mark(&mut classes, i, i + len, ByteClass::Literal);
                            i += len;
                        }
                        None => i += 1,
                    }
                } else {
                    if let Some(Frame::Template(depth)) = top {
                        if b == b'{' {
                            stack.pop();
                            stack.push(Frame::Template(depth + 1));
                        } else if b == b'}' {
                            stack.pop();
                            if depth > 0 {
                                stack.push(Frame::Template(depth - 1));
                            }
                        }
                    }
                    i += 1;
                }
            }
        }
    }
    classes
}

fn mark(classes: &mut [ByteClass], start: usize, end: usize, class: ByteClass) {
    for c in &mut classes[start..end] {
        *c = class;
    }
}

/// Kotlin block comments nest.
fn block_comment_end(bytes: &[u8], start: usize) -> usize {
    let mut depth = 0usize;
    let mut i = start;
    while i < bytes.len() {
        if bytes[i..].starts_with(b"/*") {
            depth += 1;
            i += 2;
        } else if bytes[i..].starts_with(b"*/") {
            depth -= 1;
            i += 2;
            if depth == 0 {
                return i;
            }
        } else {
            i += 1;
        }
    }
    bytes.len()
}

/// Length of a char literal starting at `bytes[0] == '\''`, or `None` when the
/// quote is not a well-formed literal (an apostrophe in prose, say).
fn char_literal_len(bytes: &[u8]) -> Option<usize> {
    match bytes.get(1)? {
        b'\\' => {
            if bytes.get(2) == Some(&b'u') {
                (bytes.get(7) == Some(&b'\'')).then_some(8)
            } else {
                (bytes.get(3) == Some(&b'\'')).then_some(4)
            }
        }
        b'\'' | b'\n' => None,
        _ => {
            // One UTF-8 scalar followed by the closing quote.
            let width = utf8_width(bytes[1]);
            (bytes.get(1 + width) == Some(&b'\'')).then_some(2 + width)
        }
    }
}

fn utf8_width(first: u8) -> usize {
    match first {
        0x00..=0x7F => 1,
        0xC0..=0xDF => 2,
        0xE0..=0xEF => 3,
        _ => 4,
    }
}
