//! Small arithmetic expression grammar for scenario coefficients.
//!
//! Supported: `+ - * / ^`, parentheses, numeric literals, the variables
//! `t, x, y, u, v` (time, state, delayed state, control, delayed control)
//! and the functions `sin, cos, exp, sqrt, min, max`. Expressions compile
//! to a small AST with exact symbolic derivatives where the calculus is
//! unambiguous (power with constant exponent, no min/max kinks).

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T = 0,
    X = 1,
    Y = 2,
    U = 3,
    V = 4,
}

impl Var {
    fn from_name(name: &str) -> Option<Var> {
        match name {
            "t" => Some(Var::T),
            "x" => Some(Var::X),
            "y" => Some(Var::Y),
            "u" => Some(Var::U),
            "v" => Some(Var::V),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func2 {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Call1(Func1, Box<Expr>),
    Call2(Func2, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExprError {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "expression error at byte {}: {}", self.position, self.message)
    }
}

impl std::error::Error for ExprError {}

impl Expr {
    pub fn parse(input: &str) -> Result<Expr, ExprError> {
        let mut parser = Parser::new(input)?;
        let expr = parser.expression()?;
        match parser.peek() {
            None => Ok(expr),
            Some(tok) => Err(ExprError {
                position: tok.position,
                message: format!("unexpected trailing token '{}'", tok.kind),
            }),
        }
    }

    /// Evaluates over `(t, x, y, u, v)`.
    pub fn eval(&self, vars: &[f64; 5]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => vars[*v as usize],
            Expr::Add(a, b) => a.eval(vars) + b.eval(vars),
            Expr::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Expr::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Expr::Div(a, b) => a.eval(vars) / b.eval(vars),
            Expr::Pow(a, b) => a.eval(vars).powf(b.eval(vars)),
            Expr::Neg(a) => -a.eval(vars),
            Expr::Call1(f, a) => {
                let v = a.eval(vars);
                match f {
                    Func1::Sin => v.sin(),
                    Func1::Cos => v.cos(),
                    Func1::Exp => v.exp(),
                    Func1::Sqrt => v.sqrt(),
                }
            }
            Expr::Call2(f, a, b) => {
                let va = a.eval(vars);
                let vb = b.eval(vars);
                match f {
                    Func2::Min => va.min(vb),
                    Func2::Max => va.max(vb),
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// Exact symbolic derivative in `var`, or `None` where the expression
    /// is not smoothly differentiable in closed form (min/max kinks,
    /// non-constant exponents).
    pub fn derivative(&self, var: Var) -> Option<Expr> {
        use Expr::*;
        Some(match self {
            Const(_) => Const(0.0),
            Var(v) => Const(if *v == var { 1.0 } else { 0.0 }),
            Add(a, b) => add(a.derivative(var)?, b.derivative(var)?),
            Sub(a, b) => sub(a.derivative(var)?, b.derivative(var)?),
            Mul(a, b) => add(
                mul(a.derivative(var)?, (**b).clone()),
                mul((**a).clone(), b.derivative(var)?),
            ),
            Div(a, b) => {
                // (a' b - a b') / b^2
                let num = sub(
                    mul(a.derivative(var)?, (**b).clone()),
                    mul((**a).clone(), b.derivative(var)?),
                );
                div(num, mul((**b).clone(), (**b).clone()))
            }
            Pow(a, b) => match **b {
                Const(c) => {
                    let inner = a.derivative(var)?;
                    // c a^(c-1) a'
                    mul(
                        mul(Const(c), pow((**a).clone(), Const(c - 1.0))),
                        inner,
                    )
                }
                _ => return None,
            },
            Neg(a) => neg(a.derivative(var)?),
            Call1(f, a) => {
                let inner = a.derivative(var)?;
                let outer = match f {
                    Func1::Sin => Call1(Func1::Cos, a.clone()),
                    Func1::Cos => neg(Call1(Func1::Sin, a.clone())),
                    Func1::Exp => Call1(Func1::Exp, a.clone()),
                    Func1::Sqrt => div(Const(0.5), Call1(Func1::Sqrt, a.clone())),
                };
                mul(outer, inner)
            }
            Call2(..) => return None,
        })
    }

    /// Variables the expression actually reads.
    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Call2(_, a, b) => a.uses(var) || b.uses(var),
            Expr::Neg(a) | Expr::Call1(_, a) => a.uses(var),
        }
    }
}

// constant-folding constructors keep derivative trees small

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(c), _) if *c == 0.0 => b,
        (_, Expr::Const(c)) if *c == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (_, Expr::Const(c)) if *c == 0.0 => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(c), _) if *c == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(c)) if *c == 0.0 => Expr::Const(0.0),
        (Expr::Const(c), _) if *c == 1.0 => b,
        (_, Expr::Const(c)) if *c == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(c), _) if *c == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(c)) if *c == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Const(c)) if *c == 1.0 => a,
        (_, Expr::Const(c)) if *c == 0.0 => Expr::Const(1.0),
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        _ => Expr::Neg(Box::new(a)),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Number(n) => write!(f, "{n}"),
            TokenKind::Ident(s) => write!(f, "{s}"),
            TokenKind::Plus => write!(f, "+"),
            TokenKind::Minus => write!(f, "-"),
            TokenKind::Star => write!(f, "*"),
            TokenKind::Slash => write!(f, "/"),
            TokenKind::Caret => write!(f, "^"),
            TokenKind::LParen => write!(f, "("),
            TokenKind::RParen => write!(f, ")"),
            TokenKind::Comma => write!(f, ","),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    position: usize,
}

struct Parser {
    tokens: Vec<Token>,
    cursor: usize,
    input_len: usize,
}

fn tokenize(input: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = input.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let position = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '+' => tokens.push(Token { kind: TokenKind::Plus, position }),
            '-' => tokens.push(Token { kind: TokenKind::Minus, position }),
            '*' => tokens.push(Token { kind: TokenKind::Star, position }),
            '/' => tokens.push(Token { kind: TokenKind::Slash, position }),
            '^' => tokens.push(Token { kind: TokenKind::Caret, position }),
            '(' => tokens.push(Token { kind: TokenKind::LParen, position }),
            ')' => tokens.push(Token { kind: TokenKind::RParen, position }),
            ',' => tokens.push(Token { kind: TokenKind::Comma, position }),
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &input[start..i];
                let value: f64 = text.parse().map_err(|_| ExprError {
                    position: start,
                    message: format!("bad numeric literal '{text}'"),
                })?;
                tokens.push(Token {
                    kind: TokenKind::Number(value),
                    position: start,
                });
                continue;
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Ident(input[start..i].to_string()),
                    position: start,
                });
                continue;
            }
            other => {
                return Err(ExprError {
                    position,
                    message: format!("unexpected character '{other}'"),
                })
            }
        }
        i += 1;
    }
    Ok(tokens)
}

impl Parser {
    fn new(input: &str) -> Result<Self, ExprError> {
        Ok(Self {
            tokens: tokenize(input)?,
            cursor: 0,
            input_len: input.len(),
        })
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.cursor)
    }

    fn advance(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.cursor).cloned();
        self.cursor += 1;
        tok
    }

    fn eof_error(&self, expected: &str) -> ExprError {
        ExprError {
            position: self.input_len,
            message: format!("unexpected end of expression, expected {expected}"),
        }
    }

    fn expression(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(tok) = self.peek() {
            match tok.kind {
                TokenKind::Plus => {
                    self.advance();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                TokenKind::Minus => {
                    self.advance();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(tok) = self.peek() {
            match tok.kind {
                TokenKind::Star => {
                    self.advance();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                TokenKind::Slash => {
                    self.advance();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    // unary minus binds looser than '^': -x^2 is -(x^2)
    fn factor(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(tok) if tok.kind == TokenKind::Minus => {
                self.advance();
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Caret {
                self.advance();
                // right associative; the exponent may carry a unary minus
                let exponent = self.factor()?;
                return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
            }
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let tok = self.advance().ok_or_else(|| self.eof_error("an operand"))?;
        match tok.kind {
            TokenKind::Number(n) => Ok(Expr::Const(n)),
            TokenKind::Ident(name) => {
                // function call?
                if matches!(self.peek(), Some(t) if t.kind == TokenKind::LParen) {
                    self.advance();
                    let first = self.expression()?;
                    let two_args = match self.peek() {
                        Some(t) if t.kind == TokenKind::Comma => {
                            self.advance();
                            Some(self.expression()?)
                        }
                        _ => None,
                    };
                    match self.advance() {
                        Some(t) if t.kind == TokenKind::RParen => {}
                        Some(t) => {
                            return Err(ExprError {
                                position: t.position,
                                message: format!("expected ')', found '{}'", t.kind),
                            })
                        }
                        None => return Err(self.eof_error("')'")),
                    }
                    return match (name.as_str(), two_args) {
                        ("sin", None) => Ok(Expr::Call1(Func1::Sin, Box::new(first))),
                        ("cos", None) => Ok(Expr::Call1(Func1::Cos, Box::new(first))),
                        ("exp", None) => Ok(Expr::Call1(Func1::Exp, Box::new(first))),
                        ("sqrt", None) => Ok(Expr::Call1(Func1::Sqrt, Box::new(first))),
                        ("min", Some(second)) => {
                            Ok(Expr::Call2(Func2::Min, Box::new(first), Box::new(second)))
                        }
                        ("max", Some(second)) => {
                            Ok(Expr::Call2(Func2::Max, Box::new(first), Box::new(second)))
                        }
                        ("min" | "max", None) => Err(ExprError {
                            position: tok.position,
                            message: format!("function '{name}' takes two arguments"),
                        }),
                        ("sin" | "cos" | "exp" | "sqrt", Some(_)) => Err(ExprError {
                            position: tok.position,
                            message: format!("function '{name}' takes one argument"),
                        }),
                        _ => Err(ExprError {
                            position: tok.position,
                            message: format!("unknown function '{name}'"),
                        }),
                    };
                }
                match Var::from_name(&name) {
                    Some(v) => Ok(Expr::Var(v)),
                    None => Err(ExprError {
                        position: tok.position,
                        message: format!(
                            "unknown identifier '{name}' (variables are t, x, y, u, v)"
                        ),
                    }),
                }
            }
            TokenKind::LParen => {
                let inner = self.expression()?;
                match self.advance() {
                    Some(t) if t.kind == TokenKind::RParen => Ok(inner),
                    Some(t) => Err(ExprError {
                        position: t.position,
                        message: format!("expected ')', found '{}'", t.kind),
                    }),
                    None => Err(self.eof_error("')'")),
                }
            }
            other => Err(ExprError {
                position: tok.position,
                message: format!("expected an operand, found '{other}'"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(src: &str, vars: [f64; 5]) -> f64 {
        Expr::parse(src).unwrap().eval(&vars)
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(eval("1 + 2 * 3", [0.0; 5]), 7.0);
        assert_eq!(eval("(1 + 2) * 3", [0.0; 5]), 9.0);
        assert_eq!(eval("2 ^ 3 ^ 2", [0.0; 5]), 512.0); // right assoc
        assert_eq!(eval("-x^2", [0.0, 3.0, 0.0, 0.0, 0.0]), -9.0);
        assert_eq!(eval("6 / 3 / 2", [0.0; 5]), 1.0); // left assoc
    }

    #[test]
    fn variables_and_functions() {
        let vars = [0.5, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(eval("t + x + y + u + v", vars), 10.5);
        assert_eq!(eval("min(x, y)", vars), 1.0);
        assert_eq!(eval("max(u, v)", vars), 4.0);
        assert!((eval("sin(t)^2 + cos(t)^2", vars) - 1.0).abs() < 1e-15);
        assert!((eval("exp(0) + sqrt(4)", vars) - 3.0).abs() < 1e-15);
        assert!((eval("1.5e2", vars) - 150.0).abs() < 1e-15);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = Expr::parse("x*+u").unwrap_err();
        assert_eq!(err.position, 2);
        assert!(err.message.contains("operand"));
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("x + w").is_err());
        assert!(Expr::parse("min(x)").is_err());
        assert!(Expr::parse("(x").is_err());
        assert!(Expr::parse("x)").is_err());
    }

    #[test]
    fn derivatives() {
        let e = Expr::parse("x^2 + 3*x*y").unwrap();
        let dx = e.derivative(Var::X).unwrap();
        let vars = [0.0, 2.0, 5.0, 0.0, 0.0];
        assert!((dx.eval(&vars) - (2.0 * 2.0 + 3.0 * 5.0)).abs() < 1e-12);
        let dy = e.derivative(Var::Y).unwrap();
        assert!((dy.eval(&vars) - 6.0).abs() < 1e-12);

        let trig = Expr::parse("sin(2*t) * exp(x)").unwrap();
        let dt = trig.derivative(Var::T).unwrap();
        let at = [0.3, 0.7, 0.0, 0.0, 0.0];
        let expect = 2.0 * (2.0f64 * 0.3).cos() * 0.7f64.exp();
        assert!((dt.eval(&at) - expect).abs() < 1e-12);

        // kinks and general powers have no closed-form derivative here
        assert!(Expr::parse("min(x, y)").unwrap().derivative(Var::X).is_none());
        assert!(Expr::parse("x^y").unwrap().derivative(Var::X).is_none());
        // but unused-variable derivatives are exact zero
        assert_eq!(
            Expr::parse("sqrt(x)").unwrap().derivative(Var::U).unwrap(),
            Expr::Const(0.0)
        );
    }

    #[test]
    fn usage_analysis() {
        let e = Expr::parse("x + sin(u)").unwrap();
        assert!(e.uses(Var::X));
        assert!(e.uses(Var::U));
        assert!(!e.uses(Var::Y));
    }
}
