//! Coefficient expression language.
//!
//! Grammar (precedence climbing, lowest first):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?            right associative
//! atom    := number | var | func '(' expr ')' | '(' expr ')'
//! var     := 'x' [1-9][0-9]* | 'z' [1-9][0-9]*
//! func    := sin | cos | exp | tanh | sqrt | abs
//! ```
//!
//! `-x1^2` parses as `-(x1^2)` and `2^-1` as `2^(-1)`. Parsed trees are
//! compiled to a postfix program for evaluation; the tree evaluator and the
//! compiled program perform identical floating point operations.

use std::fmt;

use thiserror::Error;

/// Largest operand stack the compiled evaluator supports.
const MAX_STACK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Slow coordinate, zero based (`x1` is `X(0)`).
    X(usize),
    /// Fast coordinate, zero based.
    Z(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sin,
    Cos,
    Exp,
    Tanh,
    Sqrt,
    Abs,
}

impl UnaryFn {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => UnaryFn::Sin,
            "cos" => UnaryFn::Cos,
            "exp" => UnaryFn::Exp,
            "tanh" => UnaryFn::Tanh,
            "sqrt" => UnaryFn::Sqrt,
            "abs" => UnaryFn::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Exp => "exp",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Abs => "abs",
        }
    }

    fn apply(self, a: f64) -> Result<f64, EvalError> {
        let r = match self {
            UnaryFn::Sin => a.sin(),
            UnaryFn::Cos => a.cos(),
            UnaryFn::Exp => a.exp(),
            UnaryFn::Tanh => a.tanh(),
            UnaryFn::Sqrt => {
                if a < 0.0 {
                    return Err(EvalError::Domain {
                        op: "sqrt",
                        detail: format!("negative argument {a}"),
                    });
                }
                a.sqrt()
            }
            UnaryFn::Abs => a.abs(),
        };
        finite(self.name(), r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn apply(self, a: f64, b: f64) -> Result<f64, EvalError> {
        let r = match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => {
                if b == 0.0 {
                    return Err(EvalError::Domain {
                        op: "/",
                        detail: "division by zero".into(),
                    });
                }
                a / b
            }
            BinOp::Pow => a.powf(b),
        };
        finite(self.symbol(), r)
    }
}

fn finite(op: &'static str, r: f64) -> Result<f64, EvalError> {
    if r.is_finite() {
        Ok(r)
    } else {
        Err(EvalError::Domain {
            op,
            detail: format!("non-finite result {r}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(UnaryFn, Box<Expr>),
}

impl Expr {
    /// Direct recursive evaluation. Used as the reference path for the
    /// compiled program.
    pub fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(Var::X(i)) => Ok(x[*i]),
            Expr::Var(Var::Z(i)) => Ok(z[*i]),
            Expr::Neg(a) => Ok(-a.eval(x, z)?),
            Expr::Bin(op, a, b) => {
                let a = a.eval(x, z)?;
                let b = b.eval(x, z)?;
                op.apply(a, b)
            }
            Expr::Call(f, a) => f.apply(a.eval(x, z)?),
        }
    }

    fn depends_on_z(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Var(Var::X(_)) => false,
            Expr::Var(Var::Z(_)) => true,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on_z(),
            Expr::Bin(_, a, b) => a.depends_on_z() || b.depends_on_z(),
        }
    }

    fn compile(&self, out: &mut Vec<Instr>) {
        match self {
            Expr::Num(v) => out.push(Instr::Const(*v)),
            Expr::Var(Var::X(i)) => out.push(Instr::X(*i)),
            Expr::Var(Var::Z(i)) => out.push(Instr::Z(*i)),
            Expr::Neg(a) => {
                a.compile(out);
                out.push(Instr::Neg);
            }
            Expr::Bin(op, a, b) => {
                a.compile(out);
                b.compile(out);
                out.push(Instr::Bin(*op));
            }
            Expr::Call(f, a) => {
                a.compile(out);
                out.push(Instr::Call(*f));
            }
        }
    }
}

/// Fully parenthesised rendering; re-parsing it yields the same tree
/// (negative literals come back as `Neg(Num)`, which prints identically).
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if v.is_sign_negative() => write!(f, "(-{:?})", -v),
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(Var::X(i)) => write!(f, "x{}", i + 1),
            Expr::Var(Var::Z(i)) => write!(f, "z{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Const(f64),
    X(usize),
    Z(usize),
    Neg,
    Bin(BinOp),
    Call(UnaryFn),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax {
        found: String,
        expected: Vec<&'static str>,
    },
    UnknownIdentifier(String),
    Arity {
        function: String,
        expected: usize,
        found: usize,
    },
    InvalidNumber(String),
    TooDeep,
}

/// Parse failure with the byte offset into the source text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", self.describe())]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn describe(&self) -> String {
        match &self.kind {
            ParseErrorKind::Syntax { found, expected } => format!(
                "syntax error at offset {}: found {found}, expected one of [{}]",
                self.offset,
                expected.join(", ")
            ),
            ParseErrorKind::UnknownIdentifier(name) => {
                format!("unknown identifier `{name}` at offset {}", self.offset)
            }
            ParseErrorKind::Arity {
                function,
                expected,
                found,
            } => format!(
                "`{function}` takes {expected} argument(s), found {found} at offset {}",
                self.offset
            ),
            ParseErrorKind::InvalidNumber(text) => {
                format!("invalid number `{text}` at offset {}", self.offset)
            }
            ParseErrorKind::TooDeep => {
                format!("expression nested too deeply (offset {})", self.offset)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::InvalidNumber(s.to_string()),
                })?;
                out.push((start, Tok::Num(v)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::Syntax {
                        found: format!("character `{ch}`"),
                        expected: vec!["number", "identifier", "operator", "`(`", "`)`"],
                    },
                });
            }
        };
        i += 1;
        out.push((start, tok));
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    dims: (usize, usize),
    depth: usize,
    _text: &'a str,
}

const ATOM_START: &[&str] = &["number", "variable", "function", "`(`", "`-`"];

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn syntax(&self, expected: &[&'static str]) -> ParseError {
        ParseError {
            offset: self.offset(),
            kind: ParseErrorKind::Syntax {
                found: self.peek().describe(),
                expected: expected.to_vec(),
            },
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_STACK / 2 {
            return Err(ParseError {
                offset: self.offset(),
                kind: ParseErrorKind::TooDeep,
            });
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            self.enter()?;
            let exp = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let offset = self.offset();
                self.bump();
                if let Some(func) = UnaryFn::from_name(&name) {
                    if *self.peek() != Tok::LParen {
                        return Err(self.syntax(&["`(`"]));
                    }
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect_rparen()?;
                    if args.len() != 1 {
                        return Err(ParseError {
                            offset,
                            kind: ParseErrorKind::Arity {
                                function: name,
                                expected: 1,
                                found: args.len(),
                            },
                        });
                    }
                    let arg = args.pop().expect("one argument");
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                self.variable(&name).map(Expr::Var).ok_or(ParseError {
                    offset,
                    kind: ParseErrorKind::UnknownIdentifier(name),
                })
            }
            _ => Err(self.syntax(ATOM_START)),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if *self.peek() != Tok::RParen {
            let expected: &[&'static str] = match self.peek() {
                Tok::End | Tok::Comma | Tok::RParen => &["`)`"],
                _ => &["operator", "`)`"],
            };
            return Err(self.syntax(expected));
        }
        self.bump();
        Ok(())
    }

    fn variable(&self, name: &str) -> Option<Var> {
        let (head, digits) = name.split_at(1);
        if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let idx: usize = digits.parse().ok()?;
        match head {
            "x" if idx <= self.dims.0 => Some(Var::X(idx - 1)),
            "z" if idx <= self.dims.1 => Some(Var::Z(idx - 1)),
            _ => None,
        }
    }
}

/// A parsed coefficient expression together with its compiled program.
#[derive(Debug, Clone)]
pub struct CoefficientExpr {
    tree: Expr,
    program: Vec<Instr>,
    depends_on_z: bool,
    fits_stack: bool,
}

impl PartialEq for CoefficientExpr {
    fn eq(&self, other: &Self) -> bool {
        self.tree == other.tree
    }
}

impl CoefficientExpr {
    pub fn from_tree(tree: Expr) -> Self {
        let mut program = Vec::new();
        tree.compile(&mut program);
        let depends_on_z = tree.depends_on_z();
        let mut depth = 0usize;
        let mut peak = 0usize;
        for ins in &program {
            match ins {
                Instr::Const(_) | Instr::X(_) | Instr::Z(_) => depth += 1,
                Instr::Bin(_) => depth -= 1,
                Instr::Neg | Instr::Call(_) => {}
            }
            peak = peak.max(depth);
        }
        CoefficientExpr {
            tree,
            program,
            depends_on_z,
            fits_stack: peak <= MAX_STACK,
        }
    }

    pub fn constant(v: f64) -> Self {
        Self::from_tree(Expr::Num(v))
    }

    pub fn tree(&self) -> &Expr {
        &self.tree
    }

    pub fn depends_on_z(&self) -> bool {
        self.depends_on_z
    }

    /// True when the expression reads neither `x` nor `z`.
    pub fn is_state_free(&self) -> bool {
        !self.program.iter().any(|i| matches!(i, Instr::X(_) | Instr::Z(_)))
    }

    /// Evaluate the compiled program. Bitwise equal to `self.tree().eval`.
    #[inline]
    pub fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64, EvalError> {
        // Fast path for the common literal / single-variable cases.
        if let [only] = self.program.as_slice() {
            return Ok(match *only {
                Instr::Const(v) => v,
                Instr::X(i) => x[i],
                Instr::Z(i) => z[i],
                _ => unreachable!("a one-instruction program is a leaf"),
            });
        }
        if !self.fits_stack {
            return self.tree.eval(x, z);
        }
        let mut stack = [0.0f64; MAX_STACK];
        let mut sp = 0usize;
        for ins in &self.program {
            match *ins {
                Instr::Const(v) => {
                    stack[sp] = v;
                    sp += 1;
                }
                Instr::X(i) => {
                    stack[sp] = x[i];
                    sp += 1;
                }
                Instr::Z(i) => {
                    stack[sp] = z[i];
                    sp += 1;
                }
                Instr::Neg => stack[sp - 1] = -stack[sp - 1],
                Instr::Bin(op) => {
                    sp -= 1;
                    stack[sp - 1] = op.apply(stack[sp - 1], stack[sp])?;
                }
                Instr::Call(f) => stack[sp - 1] = f.apply(stack[sp - 1])?,
            }
        }
        debug_assert_eq!(sp, 1);
        Ok(stack[0])
    }
}

impl fmt::Display for CoefficientExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.tree.fmt(f)
    }
}

/// Parse `text` as an expression over `x1..xm` and `z1..zn`.
pub fn parse_expression(text: &str, dims: (usize, usize)) -> Result<CoefficientExpr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        dims,
        depth: 0,
        _text: text,
    };
    if *p.peek() == Tok::End {
        return Err(p.syntax(ATOM_START));
    }
    let tree = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.syntax(&["operator", "end of input"]));
    }
    Ok(CoefficientExpr::from_tree(tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> CoefficientExpr {
        parse_expression(s, (2, 2)).unwrap()
    }

    #[test]
    fn negated_variable() {
        let e = parse_expression("-z1", (1, 1)).unwrap();
        assert_eq!(*e.tree(), Expr::Neg(Box::new(Expr::Var(Var::Z(0)))));
        assert_eq!(e.eval(&[0.0], &[2.0]).unwrap(), -2.0);
    }

    #[test]
    fn tanh_plus_scaled_fast() {
        let e = parse_expression("tanh(x1)+0.5*z1", (1, 1)).unwrap();
        assert_eq!(e.eval(&[0.0], &[2.0]).unwrap(), 1.0);
    }

    #[test]
    fn unterminated_paren_offset() {
        let err = parse_expression("x1*(", (1, 1)).unwrap_err();
        assert_eq!(err.offset, 4);
        assert!(matches!(err.kind, ParseErrorKind::Syntax { .. }));
    }

    #[test]
    fn unknown_identifier_and_out_of_range_variable() {
        let err = parse_expression("y1 + 1", (1, 1)).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownIdentifier("y1".into()));
        assert_eq!(err.offset, 0);
        let err = parse_expression("x1 + z2", (1, 1)).unwrap_err();
        assert_eq!(err.offset, 5);
        assert!(parse_expression("x0", (1, 1)).is_err());
    }

    #[test]
    fn arity_mismatch() {
        let err = parse_expression("sin(x1, z1)", (1, 1)).unwrap_err();
        assert_eq!(
            err.kind,
            ParseErrorKind::Arity {
                function: "sin".into(),
                expected: 1,
                found: 2
            }
        );
    }

    #[test]
    fn empty_and_trailing_input() {
        assert!(parse_expression("", (1, 1)).is_err());
        assert!(parse_expression("   ", (1, 1)).is_err());
        let err = parse_expression("x1 x1", (1, 1)).unwrap_err();
        assert_eq!(err.offset, 3);
    }

    #[test]
    fn precedence_and_associativity() {
        let x = [3.0, 0.0];
        let z = [0.0, 0.0];
        assert_eq!(parse("-x1^2").eval(&x, &z).unwrap(), -9.0);
        assert_eq!(parse("2^3^2").eval(&x, &z).unwrap(), 512.0);
        assert_eq!(parse("2^-1").eval(&x, &z).unwrap(), 0.5);
        assert_eq!(parse("1 - 2 - 3").eval(&x, &z).unwrap(), -4.0);
        assert_eq!(parse("8 / 4 / 2").eval(&x, &z).unwrap(), 1.0);
        assert_eq!(parse("1 + 2 * 3").eval(&x, &z).unwrap(), 7.0);
        assert_eq!(parse("1.5e1 + 2E-1").eval(&x, &z).unwrap(), 15.2);
    }

    #[test]
    fn domain_errors_are_reported() {
        let x = [-1.0, 0.0];
        let z = [0.0, 0.0];
        assert!(matches!(
            parse("sqrt(x1)").eval(&x, &z),
            Err(EvalError::Domain { op: "sqrt", .. })
        ));
        assert!(matches!(
            parse("1 / z1").eval(&x, &z),
            Err(EvalError::Domain { op: "/", .. })
        ));
        assert!(parse("exp(1000)").eval(&x, &z).is_err());
        assert!(parse("x1 ^ 0.5").eval(&x, &z).is_err());
    }

    #[test]
    fn z_dependence_detected() {
        assert!(!parse("tanh(x1) + 2").depends_on_z());
        assert!(parse("x1 * z2").depends_on_z());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-5.0f64..5.0).prop_map(Expr::Num),
            (0usize..2).prop_map(|i| Expr::Var(Var::X(i))),
            (0usize..2).prop_map(|i| Expr::Var(Var::Z(i))),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (
                    prop_oneof![
                        Just(UnaryFn::Sin),
                        Just(UnaryFn::Cos),
                        Just(UnaryFn::Exp),
                        Just(UnaryFn::Tanh),
                        Just(UnaryFn::Sqrt),
                        Just(UnaryFn::Abs)
                    ],
                    inner
                )
                    .prop_map(|(f, a)| Expr::Call(f, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_is_idempotent(tree in arb_expr()) {
            let printed = tree.to_string();
            let reparsed = parse_expression(&printed, (2, 2)).unwrap();
            let printed_again = reparsed.to_string();
            prop_assert_eq!(&printed, &printed_again);
            let third = parse_expression(&printed_again, (2, 2)).unwrap();
            prop_assert_eq!(reparsed.tree(), third.tree());
        }

        #[test]
        fn printed_form_evaluates_bitwise_equal(
            tree in arb_expr(),
            x in proptest::array::uniform2(-3.0f64..3.0),
            z in proptest::array::uniform2(-3.0f64..3.0),
        ) {
            let reparsed = parse_expression(&tree.to_string(), (2, 2)).unwrap();
            let direct = tree.eval(&x, &z);
            let compiled = CoefficientExpr::from_tree(tree.clone()).eval(&x, &z);
            let printed = reparsed.eval(&x, &z);
            match (direct, compiled, printed) {
                (Ok(a), Ok(b), Ok(c)) => {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                    prop_assert_eq!(a.to_bits(), c.to_bits());
                    prop_assert!(a.is_finite());
                }
                (Err(_), Err(_), Err(_)) => {}
                other => prop_assert!(false, "paths disagree: {:?}", other),
            }
        }
    }
}
