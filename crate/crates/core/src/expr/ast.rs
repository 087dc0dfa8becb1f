//! Expression tree and its text form.
//!
//! The printer is precedence-aware and inserts the minimal parentheses needed
//! to reparse to the identical tree, which is what the round-trip tests pin
//! down. Numeric literals print through Rust's shortest-round-trip `f64`
//! formatting, so values survive a print/parse cycle bit for bit.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Neg,
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl UnaryFn {
    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Neg => "neg",
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Tan => "tan",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Abs => "abs",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "neg" => UnaryFn::Neg,
            "sin" => UnaryFn::Sin,
            "cos" => UnaryFn::Cos,
            "tan" => UnaryFn::Tan,
            "exp" => UnaryFn::Exp,
            "log" => UnaryFn::Log,
            "sqrt" => UnaryFn::Sqrt,
            "abs" => UnaryFn::Abs,
            _ => return None,
        })
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
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    /// Index into the owning expression's variable list.
    Var(usize),
    Unary(UnaryFn, Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
}

/// A parsed scalar expression together with the variable names it may
/// reference. Evaluation points are slices ordered like `vars`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprAst {
    vars: Vec<String>,
    root: Node,
}

impl ExprAst {
    pub fn new(vars: Vec<String>, root: Node) -> Result<Self> {
        let expr = ExprAst { vars, root };
        expr.check_var_indices(&expr.root)?;
        Ok(expr)
    }

    fn check_var_indices(&self, node: &Node) -> Result<()> {
        match node {
            Node::Num(_) => Ok(()),
            Node::Var(i) => {
                if *i < self.vars.len() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "variable index {i} out of range for {} variable(s)",
                        self.vars.len()
                    )))
                }
            }
            Node::Unary(_, a) => self.check_var_indices(a),
            Node::Binary(_, a, b) => {
                self.check_var_indices(a)?;
                self.check_var_indices(b)
            }
        }
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    /// Whether the expression actually mentions variable `i`.
    pub fn uses_var(&self, i: usize) -> bool {
        fn walk(node: &Node, i: usize) -> bool {
            match node {
                Node::Num(_) => false,
                Node::Var(j) => *j == i,
                Node::Unary(_, a) => walk(a, i),
                Node::Binary(_, a, b) => walk(a, i) || walk(b, i),
            }
        }
        walk(&self.root, i)
    }

    /// Text form that reparses (with the same variable list) to this tree.
    pub fn print(&self) -> String {
        self.to_string()
    }
}

/// Printing precedence levels, loosest to tightest. `^` binds tighter than
/// unary minus, which binds tighter than `*`/`/`.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Num(_) | Node::Var(_) => PREC_ATOM,
        Node::Unary(UnaryFn::Neg, _) => PREC_NEG,
        Node::Unary(..) => PREC_ATOM,
        Node::Binary(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
        Node::Binary(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
        Node::Binary(BinOp::Pow, ..) => PREC_POW,
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, vars: &[String]) -> fmt::Result {
    let child = |f: &mut fmt::Formatter<'_>, c: &Node, min: u8| -> fmt::Result {
        if precedence(c) < min {
            write!(f, "(")?;
            write_node(f, c, vars)?;
            write!(f, ")")
        } else {
            write_node(f, c, vars)
        }
    };
    match node {
        Node::Num(c) => write!(f, "{c}"),
        Node::Var(i) => write!(f, "{}", vars[*i]),
        Node::Unary(UnaryFn::Neg, a) => {
            write!(f, "-")?;
            // A numeric child would fuse into a literal on reparse; wrap it.
            if matches!(**a, Node::Num(_)) {
                write!(f, "(")?;
                write_node(f, a, vars)?;
                write!(f, ")")
            } else {
                child(f, a, PREC_NEG)
            }
        }
        Node::Unary(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a, vars)?;
            write!(f, ")")
        }
        Node::Binary(op, a, b) => {
            let (lmin, rmin) = match op {
                // Left-associative chains print bare on the left, the right
                // side needs strictly tighter binding.
                BinOp::Add => (PREC_ADD, PREC_ADD + 1),
                BinOp::Sub => (PREC_ADD, PREC_ADD + 1),
                BinOp::Mul => (PREC_MUL, PREC_MUL + 1),
                BinOp::Div => (PREC_MUL, PREC_MUL + 1),
                // Right-associative; the base must be an atom or a
                // parenthesized group so `(x^2)^3` and `(-x)^2` survive.
                BinOp::Pow => (PREC_POW + 1, PREC_NEG),
            };
            child(f, a, lmin)?;
            write!(f, " {} ", op.symbol())?;
            child(f, b, rmin)
        }
    }
}

impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, &self.vars)
    }
}
