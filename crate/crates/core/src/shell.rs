//! Tool extraction from shell command strings.
//!
//! [`extract_tools`] recognizes a POSIX subset sufficient for agent
//! trajectories: pipelines, `&&`/`||`/`;`/`&` lists, subshell parentheses,
//! environment-assignment prefixes, simple redirections (including heredocs,
//! whose bodies are data), and command substitution one level deep. Command
//! words in head position become tools; builtins count, quoted or
//! variable-expanded heads do not, and path invocations are reduced to
//! their final component.
//!
//! Anything outside the subset is handled conservatively, never with a
//! panic: nested command substitution drops the inner tools and sets the
//! parse-warning flag; arithmetic expansion, control-flow keywords,
//! unbalanced quoting, and malformed redirections yield an empty tool set
//! with the flag set.

use std::collections::BTreeSet;

/// Result of scanning one command string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ToolExtraction {
    /// Distinct tool names in lexicographic order.
    pub tools: BTreeSet<String>,
    /// True when the command used constructs outside the recognized
    /// subset; the tool set is then incomplete or empty.
    pub parse_warning: bool,
}

/// Extracts the set of tools a command invokes.
pub fn extract_tools(command: &str) -> ToolExtraction {
    let mut parser = Parser::new(command, 0);
    match parser.parse() {
        Ok(()) => ToolExtraction { tools: parser.tools, parse_warning: parser.warning },
        Err(Abort) => ToolExtraction { tools: BTreeSet::new(), parse_warning: true },
    }
}

/// Shell reserved words that introduce control flow outside the subset.
const RESERVED: &[&str] = &[
    "if", "then", "elif", "else", "fi", "for", "while", "until", "do", "done", "case", "esac",
    "select", "function", "in", "coproc",
];

/// Whole-input bailout: the command is outside the recognized subset.
struct Abort;

struct Word {
    text: String,
    /// Any character came from inside quotes.
    quoted: bool,
    /// Any character came from parameter or command expansion.
    dynamic: bool,
    /// Index of the first quoted or dynamic character, for assignment
    /// prefix detection.
    first_tainted: usize,
}

impl Word {
    fn is_assignment_prefix(&self) -> bool {
        let Some(eq) = self.text.find('=') else { return false };
        if eq == 0 || eq >= self.first_tainted {
            return false;
        }
        let name = &self.text[..eq];
        let mut chars = name.chars();
        let first = chars.next().expect("eq > 0");
        (first.is_ascii_alphabetic() || first == '_')
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    depth: u8,
    paren_depth: i32,
    tools: BTreeSet<String>,
    warning: bool,
}

impl Parser {
    fn new(text: &str, depth: u8) -> Self {
        Parser {
            chars: text.chars().collect(),
            pos: 0,
            depth,
            paren_depth: 0,
            tools: BTreeSet::new(),
            warning: false,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn parse(&mut self) -> Result<(), Abort> {
        let mut expecting_head = true;
        loop {
            while matches!(self.peek(), Some(' ' | '\t')) {
                self.pos += 1;
            }
            let Some(c) = self.peek() else { break };
            match c {
                '\n' | ';' => {
                    self.pos += 1;
                    // `;;` belongs to case clauses, outside the subset.
                    if c == ';' && self.peek() == Some(';') {
                        return Err(Abort);
                    }
                    expecting_head = true;
                }
                '|' => {
                    self.pos += 1;
                    if self.peek() == Some('|') || self.peek() == Some('&') {
                        self.pos += 1;
                    }
                    expecting_head = true;
                }
                '&' => {
                    self.pos += 1;
                    match self.peek() {
                        Some('&') => {
                            self.pos += 1;
                            expecting_head = true;
                        }
                        Some('>') => {
                            // `&>file` / `&>>file` redirect both streams.
                            self.pos += 1;
                            if self.peek() == Some('>') {
                                self.pos += 1;
                            }
                            self.consume_redirect_target()?;
                        }
                        _ => expecting_head = true,
                    }
                }
                '(' => {
                    self.pos += 1;
                    self.paren_depth += 1;
                    expecting_head = true;
                }
                ')' => {
                    self.pos += 1;
                    self.paren_depth -= 1;
                    if self.paren_depth < 0 {
                        return Err(Abort);
                    }
                    expecting_head = false;
                }
                '#' => {
                    // Comment to end of line; only reachable between words.
                    while !matches!(self.peek(), None | Some('\n')) {
                        self.pos += 1;
                    }
                }
                '<' | '>' => self.consume_redirect(None)?,
                _ => {
                    let word = self.read_word()?;
                    let at_redirect = matches!(self.peek(), Some('<' | '>'));
                    let is_fd = !word.text.is_empty()
                        && !word.quoted
                        && !word.dynamic
                        && word.text.chars().all(|c| c.is_ascii_digit());
                    if at_redirect && is_fd {
                        self.consume_redirect(Some(&word.text))?;
                        continue;
                    }
                    if word.text.is_empty() && !word.quoted && !word.dynamic {
                        // Line continuations and stray escapes produce
                        // empty words; they carry nothing.
                        continue;
                    }
                    if !expecting_head {
                        continue;
                    }
                    if word.is_assignment_prefix() {
                        continue;
                    }
                    if !word.quoted && !word.dynamic {
                        if RESERVED.contains(&word.text.as_str()) {
                            return Err(Abort);
                        }
                        if word.text == "!" || word.text == "{" || word.text == "}" {
                            continue;
                        }
                        let name = word.text.rsplit('/').next().unwrap_or("");
                        if !name.is_empty() {
                            self.tools.insert(name.to_string());
                        }
                    }
                    expecting_head = false;
                }
            }
        }
        if self.paren_depth != 0 {
            return Err(Abort);
        }
        Ok(())
    }

    /// Consumes a redirection operator at the cursor plus its target word.
    /// `fd` is a file-descriptor prefix already read, e.g. the `2` of `2>`.
    fn consume_redirect(&mut self, _fd: Option<&str>) -> Result<(), Abort> {
        let op = self.bump().expect("caller saw a redirect char");
        if op == '<' && self.peek() == Some('<') {
            self.pos += 1;
            if self.peek() == Some('-') {
                self.pos += 1;
            }
            return self.consume_heredoc();
        }
        if op == '>' && self.peek() == Some('>') {
            self.pos += 1;
        }
        if self.peek() == Some('&') {
            // Descriptor duplication, e.g. `2>&1`: no target word follows.
            self.pos += 1;
            if self.peek() == Some('-') {
                self.pos += 1;
                return Ok(());
            }
            if !matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                return Err(Abort);
            }
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
            return Ok(());
        }
        self.consume_redirect_target()
    }

    fn consume_redirect_target(&mut self) -> Result<(), Abort> {
        while matches!(self.peek(), Some(' ' | '\t')) {
            self.pos += 1;
        }
        match self.peek() {
            None | Some('\n' | ';' | '|' | '&' | '(' | ')' | '<' | '>') => Err(Abort),
            Some(_) => {
                let word = self.read_word()?;
                if word.text.is_empty() && !word.quoted && !word.dynamic {
                    return Err(Abort);
                }
                Ok(())
            }
        }
    }

    /// Consumes a heredoc delimiter plus everything on following lines up
    /// to and including the terminator line. Heredoc bodies are data.
    fn consume_heredoc(&mut self) -> Result<(), Abort> {
        while matches!(self.peek(), Some(' ' | '\t')) {
            self.pos += 1;
        }
        let delim_word = self.read_word()?;
        if delim_word.text.is_empty() {
            return Err(Abort);
        }
        // The rest of the current line still belongs to the command.
        let mut rest_of_line = String::new();
        while let Some(c) = self.peek() {
            self.pos += 1;
            if c == '\n' {
                break;
            }
            rest_of_line.push(c);
        }
        loop {
            if self.peek().is_none() {
                // Unterminated heredoc.
                return Err(Abort);
            }
            let mut line = String::new();
            while let Some(c) = self.bump() {
                if c == '\n' {
                    break;
                }
                line.push(c);
            }
            if line.trim_start_matches('\t') == delim_word.text {
                break;
            }
        }
        // Splice the remainder of the command line back into the stream
        // position by parsing it recursively within this parser's state.
        if !rest_of_line.trim().is_empty() {
            let mut sub = Parser::new(&rest_of_line, self.depth);
            sub.parse()?;
            self.tools.append(&mut sub.tools);
            self.warning |= sub.warning;
        }
        Ok(())
    }

    /// Reads one word, handling quoting, escapes, and expansions.
    fn read_word(&mut self) -> Result<Word, Abort> {
        let mut word = Word { text: String::new(), quoted: false, dynamic: false, first_tainted: usize::MAX };
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\n' | '|' | ';' | '&' | '(' | ')' | '<' | '>' => break,
                '\\' => {
                    self.pos += 1;
                    match self.bump() {
                        // Backslash-newline is a line continuation.
                        Some('\n') | None => {}
                        Some(next) => word.text.push(next),
                    }
                }
                '\'' => {
                    self.pos += 1;
                    word.quoted = true;
                    word.first_tainted = word.first_tainted.min(word.text.len());
                    loop {
                        match self.bump() {
                            None => return Err(Abort),
                            Some('\'') => break,
                            Some(inner) => word.text.push(inner),
                        }
                    }
                }
                '"' => {
                    self.pos += 1;
                    word.quoted = true;
                    word.first_tainted = word.first_tainted.min(word.text.len());
                    loop {
                        match self.peek() {
                            None => return Err(Abort),
                            Some('"') => {
                                self.pos += 1;
                                break;
                            }
                            Some('\\') => {
                                self.pos += 1;
                                match self.bump() {
                                    None => return Err(Abort),
                                    Some('\n') => {}
                                    Some(next) => word.text.push(next),
                                }
                            }
                            Some('$') => self.consume_dollar(&mut word)?,
                            Some('`') => self.consume_backticks(&mut word)?,
                            Some(inner) => {
                                self.pos += 1;
                                word.text.push(inner);
                            }
                        }
                    }
                }
                '$' => self.consume_dollar(&mut word)?,
                '`' => self.consume_backticks(&mut word)?,
                _ => {
                    self.pos += 1;
                    word.text.push(c);
                }
            }
        }
        Ok(word)
    }

    /// Handles `$(...)`, `$((...))`, `${...}`, and `$name` at the cursor.
    fn consume_dollar(&mut self, word: &mut Word) -> Result<(), Abort> {
        debug_assert_eq!(self.peek(), Some('$'));
        self.pos += 1;
        match self.peek() {
            Some('(') if self.peek_at(1) == Some('(') => Err(Abort),
            Some('(') => {
                self.pos += 1;
                word.dynamic = true;
                word.first_tainted = word.first_tainted.min(word.text.len());
                let inner = self.collect_balanced_parens()?;
                self.scan_substitution(&inner)
            }
            Some('{') => {
                self.pos += 1;
                word.dynamic = true;
                word.first_tainted = word.first_tainted.min(word.text.len());
                let mut depth = 1;
                loop {
                    match self.bump() {
                        None => return Err(Abort),
                        Some('{') => depth += 1,
                        Some('}') => {
                            depth -= 1;
                            if depth == 0 {
                                break;
                            }
                        }
                        Some(_) => {}
                    }
                }
                Ok(())
            }
            Some(c) if c.is_ascii_alphanumeric() || c == '_' || c == '?' || c == '!' || c == '#' || c == '@' || c == '*' || c == '$' => {
                word.dynamic = true;
                word.first_tainted = word.first_tainted.min(word.text.len());
                if c.is_ascii_alphabetic() || c == '_' {
                    while matches!(self.peek(), Some(n) if n.is_ascii_alphanumeric() || n == '_') {
                        self.pos += 1;
                    }
                } else {
                    self.pos += 1;
                }
                Ok(())
            }
            _ => {
                word.text.push('$');
                Ok(())
            }
        }
    }

    /// Collects the body of `$(...)` up to its matching close paren,
    /// respecting quotes and nested parentheses in the body.
    fn collect_balanced_parens(&mut self) -> Result<String, Abort> {
        let mut inner = String::new();
        let mut depth = 1;
        loop {
            match self.bump() {
                None => return Err(Abort),
                Some('(') => {
                    depth += 1;
                    inner.push('(');
                }
                Some(')') => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(inner);
                    }
                    inner.push(')');
                }
                Some('\'') => {
                    inner.push('\'');
                    loop {
                        match self.bump() {
                            None => return Err(Abort),
                            Some('\'') => {
                                inner.push('\'');
                                break;
                            }
                            Some(c) => inner.push(c),
                        }
                    }
                }
                Some('"') => {
                    inner.push('"');
                    loop {
                        match self.bump() {
                            None => return Err(Abort),
                            Some('\\') => {
                                inner.push('\\');
                                if let Some(c) = self.bump() {
                                    inner.push(c);
                                }
                            }
                            Some('"') => {
                                inner.push('"');
                                break;
                            }
                            Some(c) => inner.push(c),
                        }
                    }
                }
                Some('\\') => {
                    inner.push('\\');
                    if let Some(c) = self.bump() {
                        inner.push(c);
                    }
                }
                Some(c) => inner.push(c),
            }
        }
    }

    fn consume_backticks(&mut self, word: &mut Word) -> Result<(), Abort> {
        debug_assert_eq!(self.peek(), Some('`'));
        self.pos += 1;
        word.dynamic = true;
        word.first_tainted = word.first_tainted.min(word.text.len());
        let mut inner = String::new();
        loop {
            match self.bump() {
                None => return Err(Abort),
                Some('\\') => match self.bump() {
                    None => return Err(Abort),
                    // An escaped backtick nests a substitution one level
                    // deeper; the inner scan flags it.
                    Some(c) => {
                        inner.push('\\');
                        inner.push(c);
                    }
                },
                Some('`') => break,
                Some(c) => inner.push(c),
            }
        }
        let inner = inner.replace("\\`", "`");
        self.scan_substitution(&inner)
    }

    /// Parses substitution content. Only one level is scanned for tools;
    /// deeper levels set the warning and are dropped.
    fn scan_substitution(&mut self, content: &str) -> Result<(), Abort> {
        if self.depth >= 1 {
            self.warning = true;
            return Ok(());
        }
        let mut sub = Parser::new(content, self.depth + 1);
        sub.parse()?;
        self.tools.append(&mut sub.tools);
        self.warning |= sub.warning;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tools(command: &str) -> Vec<String> {
        let out = extract_tools(command);
        assert!(!out.parse_warning, "unexpected warning for {command:?}");
        out.tools.into_iter().collect()
    }

    fn warned(command: &str) -> ToolExtraction {
        let out = extract_tools(command);
        assert!(out.parse_warning, "expected warning for {command:?}");
        out
    }

    #[test]
    fn simple_commands_and_lists() {
        assert_eq!(tools("ls -la"), ["ls"]);
        assert_eq!(tools("tar -xzf a.tgz && cd a && make -j4"), ["cd", "make", "tar"]);
        assert_eq!(tools("false || echo fallback; pwd"), ["echo", "false", "pwd"]);
        assert_eq!(tools("sleep 10 &"), ["sleep"]);
        assert_eq!(tools("(cd /tmp && ls)"), ["cd", "ls"]);
    }

    #[test]
    fn pipelines() {
        assert_eq!(tools("cat f | grep x | wc -l"), ["cat", "grep", "wc"]);
        assert_eq!(tools("FOO=1 python3 run.py | tee out.log"), ["python3", "tee"]);
    }

    #[test]
    fn assignment_prefixes_and_bare_assignments() {
        assert_eq!(tools("CC=gcc CFLAGS='-O2' make"), ["make"]);
        assert_eq!(tools("VAR=1"), Vec::<String>::new());
        assert_eq!(tools("PATH=$PATH:/opt/bin cargo build"), ["cargo"]);
    }

    #[test]
    fn quoted_heads_do_not_contribute() {
        assert_eq!(tools("echo \"ls -la\""), ["echo"]);
        assert_eq!(tools("'ls'"), Vec::<String>::new());
        assert_eq!(tools("\"grep\" -r x ."), Vec::<String>::new());
    }

    #[test]
    fn variable_heads_are_dynamic() {
        assert_eq!(tools("$CC main.c"), Vec::<String>::new());
        assert_eq!(tools("${EDITOR} notes.txt"), Vec::<String>::new());
    }

    #[test]
    fn path_heads_reduce_to_final_component() {
        assert_eq!(tools("./configure --prefix=/usr"), ["configure"]);
        assert_eq!(tools("/usr/bin/python3 -m venv env"), ["python3"]);
    }

    #[test]
    fn redirections_consume_targets() {
        assert_eq!(tools("echo hi > out.txt"), ["echo"]);
        assert_eq!(tools("echo hi >out.txt"), ["echo"]);
        assert_eq!(tools("sort < in.txt >> all.txt"), ["sort"]);
        assert_eq!(tools("make 2> err.log"), ["make"]);
        assert_eq!(tools("make > build.log 2>&1"), ["make"]);
        assert_eq!(tools("cmd &> both.log"), ["cmd"]);
        // A spaced digit is an argument, not a descriptor.
        assert_eq!(tools("echo 2 > out.txt"), ["echo"]);
    }

    #[test]
    fn command_substitution_one_level() {
        assert_eq!(tools("echo \"$(git rev-parse HEAD)\" > sha.txt"), ["echo", "git"]);
        assert_eq!(tools("kill `pgrep -f server`"), ["kill", "pgrep"]);
        assert_eq!(tools("export REV=$(git describe --tags)"), ["export", "git"]);
    }

    #[test]
    fn nested_substitution_warns_and_drops_inner() {
        let out = warned("echo $(cat $(ls))");
        assert_eq!(out.tools.into_iter().collect::<Vec<_>>(), ["cat", "echo"]);
    }

    #[test]
    fn heredoc_bodies_are_data() {
        let cmd = "cat > cfg.ini <<EOF\nls -la\nrm -rf /\nEOF";
        assert_eq!(tools(cmd), ["cat"]);
        let cmd = "cat <<'END' | grep value\nvalue = $(hostname)\nEND";
        assert_eq!(tools(cmd), ["cat", "grep"]);
    }

    #[test]
    fn out_of_subset_constructs_warn_with_empty_set() {
        for cmd in [
            "echo $((1 + 2))",
            "for f in *.txt; do cat \"$f\"; done",
            "if true; then echo ok; fi",
            "echo 'unclosed",
            "echo \"unclosed",
            "ls )",
            "( ls",
            "echo >",
            "case x in *) echo hi;; esac",
        ] {
            let out = warned(cmd);
            assert!(out.tools.is_empty(), "expected empty set for {cmd:?}, got {:?}", out.tools);
        }
    }

    #[test]
    fn builtins_count_as_tools() {
        assert_eq!(tools("cd /srv && export MODE=prod && ulimit -n 4096"), ["cd", "export", "ulimit"]);
    }

    #[test]
    fn comments_are_ignored() {
        assert_eq!(tools("ls # && rm -rf /"), ["ls"]);
    }

    #[test]
    fn line_continuations_join_words() {
        assert_eq!(tools("tar \\\n  -czf out.tgz src"), ["tar"]);
    }

    #[test]
    fn empty_input_is_empty_without_warning() {
        let out = extract_tools("");
        assert!(out.tools.is_empty());
        assert!(!out.parse_warning);
        let out = extract_tools("   \n  ");
        assert!(out.tools.is_empty());
        assert!(!out.parse_warning);
    }

    #[test]
    fn duplicate_tools_deduplicate() {
        assert_eq!(tools("grep a f | grep b | grep c"), ["grep"]);
    }

    #[test]
    fn negation_and_brace_groups() {
        assert_eq!(tools("! grep -q x file"), ["grep"]);
        assert_eq!(tools("{ make; echo done; }"), ["echo", "make"]);
    }
}
